//! Multinomial no-U-turn transitions with a diagonal metric.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::metric::Metric;
use super::Target;
use crate::stats::log_sum_exp;

/// Energy error beyond which a trajectory is declared divergent.
const MAX_DELTA_H: f64 = 1000.0;

#[derive(Clone, Debug)]
pub(crate) struct Point {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    /// `M⁻¹ p` for the current momentum.
    pub v: Vec<f64>,
    pub grad: Vec<f64>,
    pub logp: f64,
}

impl Point {
    pub fn new(target: &dyn Target, q: Vec<f64>) -> Self {
        let mut grad = vec![0.0; q.len()];
        let logp = target.log_density_grad(&q, &mut grad);
        let p = vec![0.0; q.len()];
        let v = p.clone();
        Point { q, p, v, grad, logp }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct TransitionInfo {
    pub accept_stat: f64,
    pub n_leapfrog: usize,
    pub depth: usize,
    pub divergent: bool,
    pub energy: f64,
}

pub(crate) struct Nuts<'a> {
    pub target: &'a dyn Target,
    pub metric: Metric,
    pub step_size: f64,
    pub max_depth: usize,
    pub max_leapfrog: usize,
}

/// State threaded through the recursive tree builder.
struct TreeState {
    n_leapfrog: usize,
    sum_metro_prob: f64,
    divergent: bool,
    h0: f64,
}

impl Nuts<'_> {
    fn hamiltonian(&self, z: &Point) -> f64 {
        let h = -z.logp + 0.5 * dot(&z.p, &z.v);
        if h.is_nan() {
            f64::INFINITY
        } else {
            h
        }
    }

    pub fn sample_momentum(&self, z: &mut Point, rng: &mut ChaCha8Rng) {
        self.metric.sample_momentum(rng, &mut z.p);
        self.metric.velocity(&z.p, &mut z.v);
    }

    pub fn leapfrog(&self, z: &mut Point, eps: f64) {
        for (p, g) in z.p.iter_mut().zip(&z.grad) {
            *p += 0.5 * eps * g;
        }
        self.metric.velocity(&z.p, &mut z.v);
        for (q, v) in z.q.iter_mut().zip(&z.v) {
            *q += eps * v;
        }
        z.logp = self.target.log_density_grad(&z.q, &mut z.grad);
        if !z.logp.is_finite() {
            return;
        }
        for (p, g) in z.p.iter_mut().zip(&z.grad) {
            *p += 0.5 * eps * g;
        }
        self.metric.velocity(&z.p, &mut z.v);
    }

    /// One NUTS transition starting from `current` (whose momentum is resampled).
    pub fn transition(&self, current: &Point, rng: &mut ChaCha8Rng) -> (Point, TransitionInfo) {
        let mut z = current.clone();
        self.sample_momentum(&mut z, rng);
        let h0 = self.hamiltonian(&z);

        let mut z_fwd = z.clone();
        let mut z_bck = z.clone();
        let mut z_sample = z.clone();
        let mut z_propose = z.clone();

        let p_sharp0 = z.v.clone();
        let mut p_fwd_fwd = z.p.clone();
        let mut p_sharp_fwd_fwd = p_sharp0.clone();
        let mut p_fwd_bck = z.p.clone();
        let mut p_sharp_fwd_bck = p_sharp0.clone();
        let mut p_bck_fwd = z.p.clone();
        let mut p_sharp_bck_fwd = p_sharp0.clone();
        let mut p_bck_bck = z.p.clone();
        let mut p_sharp_bck_bck = p_sharp0;

        let mut rho = z.p.clone();
        let mut log_sum_weight = 0.0;
        let mut st = TreeState {
            n_leapfrog: 0,
            sum_metro_prob: 0.0,
            divergent: false,
            h0,
        };
        let dim = z.q.len();
        let mut depth = 0;

        while depth < self.max_depth && st.n_leapfrog < self.max_leapfrog {
            let mut rho_fwd = vec![0.0; dim];
            let mut rho_bck = vec![0.0; dim];
            let mut log_sum_weight_subtree = f64::NEG_INFINITY;
            let valid = if rng.random::<f64>() > 0.5 {
                rho_bck.copy_from_slice(&rho);
                p_bck_fwd.clone_from(&p_fwd_bck);
                p_sharp_bck_fwd.clone_from(&p_sharp_fwd_bck);
                let mut zz = z_fwd.clone();
                let v = self.build_tree(
                    depth,
                    &mut zz,
                    &mut z_propose,
                    &mut p_sharp_fwd_bck,
                    &mut p_sharp_fwd_fwd,
                    &mut rho_fwd,
                    &mut p_fwd_bck,
                    &mut p_fwd_fwd,
                    1.0,
                    &mut log_sum_weight_subtree,
                    &mut st,
                    rng,
                );
                z_fwd = zz;
                v
            } else {
                rho_fwd.copy_from_slice(&rho);
                p_fwd_bck.clone_from(&p_bck_fwd);
                p_sharp_fwd_bck.clone_from(&p_sharp_bck_fwd);
                let mut zz = z_bck.clone();
                let v = self.build_tree(
                    depth,
                    &mut zz,
                    &mut z_propose,
                    &mut p_sharp_bck_fwd,
                    &mut p_sharp_bck_bck,
                    &mut rho_bck,
                    &mut p_bck_fwd,
                    &mut p_bck_bck,
                    -1.0,
                    &mut log_sum_weight_subtree,
                    &mut st,
                    rng,
                );
                z_bck = zz;
                v
            };
            if !valid {
                break;
            }
            depth += 1;

            if log_sum_weight_subtree > log_sum_weight {
                z_sample.clone_from(&z_propose);
            } else {
                let accept = (log_sum_weight_subtree - log_sum_weight).exp();
                if rng.random::<f64>() < accept {
                    z_sample.clone_from(&z_propose);
                }
            }
            log_sum_weight = log_sum_exp(log_sum_weight, log_sum_weight_subtree);

            for ((r, b), f) in rho.iter_mut().zip(&rho_bck).zip(&rho_fwd) {
                *r = b + f;
            }
            let mut persist = no_u_turn(&p_sharp_bck_bck, &p_sharp_fwd_fwd, &rho);
            let ext: Vec<f64> = rho_bck.iter().zip(&p_fwd_bck).map(|(a, b)| a + b).collect();
            persist &= no_u_turn(&p_sharp_bck_bck, &p_sharp_fwd_bck, &ext);
            let ext: Vec<f64> = rho_fwd.iter().zip(&p_bck_fwd).map(|(a, b)| a + b).collect();
            persist &= no_u_turn(&p_sharp_bck_fwd, &p_sharp_fwd_fwd, &ext);
            if !persist {
                break;
            }
        }
        let info = TransitionInfo {
            accept_stat: if st.n_leapfrog > 0 { st.sum_metro_prob / st.n_leapfrog as f64 } else { 0.0 },
            n_leapfrog: st.n_leapfrog,
            depth,
            divergent: st.divergent,
            energy: self.hamiltonian(&z_sample),
        };
        (z_sample, info)
    }

    #[allow(clippy::too_many_arguments)]
    fn build_tree(
        &self,
        depth: usize,
        z: &mut Point,
        z_propose: &mut Point,
        p_sharp_beg: &mut Vec<f64>,
        p_sharp_end: &mut Vec<f64>,
        rho: &mut [f64],
        p_beg: &mut Vec<f64>,
        p_end: &mut Vec<f64>,
        sign: f64,
        log_sum_weight: &mut f64,
        st: &mut TreeState,
        rng: &mut ChaCha8Rng,
    ) -> bool {
        if depth == 0 {
            self.leapfrog(z, sign * self.step_size);
            st.n_leapfrog += 1;
            let h = if z.logp.is_finite() { self.hamiltonian(z) } else { f64::INFINITY };
            if h - st.h0 > MAX_DELTA_H {
                st.divergent = true;
            }
            *log_sum_weight = log_sum_exp(*log_sum_weight, st.h0 - h);
            st.sum_metro_prob += if st.h0 - h > 0.0 { 1.0 } else { (st.h0 - h).exp() };
            z_propose.clone_from(z);
            p_sharp_beg.clone_from(&z.v);
            p_sharp_end.clone_from(p_sharp_beg);
            for (r, p) in rho.iter_mut().zip(&z.p) {
                *r += p;
            }
            p_beg.clone_from(&z.p);
            p_end.clone_from(p_beg);
            return !st.divergent;
        }
        let dim = z.q.len();

        let mut log_sum_weight_init = f64::NEG_INFINITY;
        let mut p_init_end = vec![0.0; dim];
        let mut p_sharp_init_end = vec![0.0; dim];
        let mut rho_init = vec![0.0; dim];
        let valid_init = self.build_tree(
            depth - 1,
            z,
            z_propose,
            p_sharp_beg,
            &mut p_sharp_init_end,
            &mut rho_init,
            p_beg,
            &mut p_init_end,
            sign,
            &mut log_sum_weight_init,
            st,
            rng,
        );
        if !valid_init {
            return false;
        }

        let mut z_propose_final = z.clone();
        let mut log_sum_weight_final = f64::NEG_INFINITY;
        let mut p_final_beg = vec![0.0; dim];
        let mut p_sharp_final_beg = vec![0.0; dim];
        let mut rho_final = vec![0.0; dim];
        let valid_final = self.build_tree(
            depth - 1,
            z,
            &mut z_propose_final,
            &mut p_sharp_final_beg,
            p_sharp_end,
            &mut rho_final,
            &mut p_final_beg,
            p_end,
            sign,
            &mut log_sum_weight_final,
            st,
            rng,
        );
        if !valid_final {
            return false;
        }

        let log_sum_weight_subtree = log_sum_exp(log_sum_weight_init, log_sum_weight_final);
        *log_sum_weight = log_sum_exp(*log_sum_weight, log_sum_weight_subtree);
        if log_sum_weight_final > log_sum_weight_subtree {
            *z_propose = z_propose_final;
        } else {
            let accept = (log_sum_weight_final - log_sum_weight_subtree).exp();
            if rng.random::<f64>() < accept {
                *z_propose = z_propose_final;
            }
        }

        let rho_subtree: Vec<f64> = rho_init.iter().zip(&rho_final).map(|(a, b)| a + b).collect();
        for (r, s) in rho.iter_mut().zip(&rho_subtree) {
            *r += s;
        }
        let mut persist = no_u_turn(p_sharp_beg, p_sharp_end, &rho_subtree);
        let ext: Vec<f64> = rho_init.iter().zip(&p_final_beg).map(|(a, b)| a + b).collect();
        persist &= no_u_turn(p_sharp_beg, &p_sharp_final_beg, &ext);
        let ext: Vec<f64> = rho_final.iter().zip(&p_init_end).map(|(a, b)| a + b).collect();
        persist &= no_u_turn(&p_sharp_init_end, p_sharp_end, &ext);
        persist
    }

    /// Step-size heuristic: double or halve until the one-step acceptance
    /// crosses 0.8.
    pub fn init_step_size(&mut self, z: &Point, rng: &mut ChaCha8Rng) {
        let threshold = 0.8f64.ln();
        let mut direction = 0.0;
        for _ in 0..100 {
            let mut zz = z.clone();
            self.sample_momentum(&mut zz, rng);
            let h0 = self.hamiltonian(&zz);
            self.leapfrog(&mut zz, self.step_size);
            let h = if zz.logp.is_finite() { self.hamiltonian(&zz) } else { f64::INFINITY };
            let delta_h = h0 - h;
            if direction == 0.0 {
                direction = if delta_h > threshold { 1.0 } else { -1.0 };
            } else if (direction > 0.0 && !(delta_h > threshold)) || (direction < 0.0 && !(delta_h < threshold)) {
                break;
            }
            self.step_size = if direction > 0.0 { 2.0 * self.step_size } else { 0.5 * self.step_size };
            if !(self.step_size > 1e-12 && self.step_size < 1e7) {
                self.step_size = self.step_size.clamp(1e-12, 1e7);
                break;
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn no_u_turn(p_sharp_minus: &[f64], p_sharp_plus: &[f64], rho: &[f64]) -> bool {
    dot(p_sharp_plus, rho) > 0.0 && dot(p_sharp_minus, rho) > 0.0
}
