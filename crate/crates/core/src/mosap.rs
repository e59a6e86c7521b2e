//! Sample allocation: choose the number of coupled samples per group under
//! a cost budget or an accuracy target.
//!
//! The continuous problem is solved by a log-barrier Newton method in the
//! budget fractions `x_k = m_k c_k / b`, on the exact variance
//! `αᵀ φ(m)⁻¹ α`, with analytic gradient and Hessian. The continuous
//! optimum is then rounded down and refilled greedily.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::blue::{invert_group, SolveOptions};
use crate::error::{check_len, Error, Result};
use crate::linalg;
use crate::ensemble::GroupSamples;
use crate::moments::{mc_fourth, CovCovModel};
use crate::structure::CouplingStructure;

/// Cap on the exchange rounds of the local search after rounding.
const IMPROVE_ROUNDS: usize = 200;

/// How the covariance of the group estimators depends on the sample size.
#[derive(Debug, Clone, PartialEq)]
pub enum VarianceModel {
    /// Mean estimation: per-sample covariances `C^(k)`, `ℂ = C / m`.
    Mean(Vec<DMatrix<f64>>),
    /// Covariance estimation: `ℂ = first / m + second / (m (m − 1))`.
    Covariance(Vec<CovCovModel>),
}

impl VarianceModel {
    fn len(&self) -> usize {
        match self {
            VarianceModel::Mean(c) => c.len(),
            VarianceModel::Covariance(c) => c.len(),
        }
    }

    fn size(&self, k: usize) -> usize {
        match self {
            VarianceModel::Mean(c) => c[k].nrows(),
            VarianceModel::Covariance(c) => c[k].size(),
        }
    }

    /// Smallest sample size a used group may have.
    pub fn min_samples(&self) -> u64 {
        match self {
            VarianceModel::Mean(_) => 1,
            VarianceModel::Covariance(_) => 2,
        }
    }

    /// Lower bound of the continuous relaxation.
    fn lower(&self) -> f64 {
        match self {
            VarianceModel::Mean(_) => 0.0,
            VarianceModel::Covariance(_) => 2.0,
        }
    }

    /// `ℂ(m)`, `ℂ'(m)`, `ℂ''(m)`.
    fn derivatives(&self, k: usize, m: f64) -> [DMatrix<f64>; 3] {
        match self {
            VarianceModel::Mean(c) => {
                let c = &c[k];
                [c / m, -(c / (m * m)), c * (2.0 / (m * m * m))]
            }
            VarianceModel::Covariance(c) => {
                let (a, b) = (&c[k].first, &c[k].second);
                let d = m - 1.0;
                [
                    a / m + b / (m * d),
                    -(a / (m * m)) + b * (1.0 / (m * m) - 1.0 / (d * d)),
                    a * (2.0 / (m * m * m)) + b * (2.0 / (d * d * d) - 2.0 / (m * m * m)),
                ]
            }
        }
    }
}

/// An allocation problem: structure (with costs), target and variance
/// model. Sample sizes in `structure` are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationProblem {
    pub structure: CouplingStructure,
    pub alpha: Vec<f64>,
    pub model: VarianceModel,
    pub options: SolveOptions,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AllocationMode {
    Budget(f64),
    /// Target standard deviation `ε`; the variance must not exceed `ε²`.
    Target(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub samples: Vec<u64>,
    pub variance: f64,
    pub cost: f64,
    pub continuous_samples: Vec<f64>,
    pub continuous_variance: f64,
    /// `(variance − continuous_variance) / continuous_variance`.
    pub gap: f64,
    /// Scaled stationarity residual of the continuous optimum.
    pub kkt_residual: f64,
}

struct Evaluation {
    f: f64,
    grad: Vec<f64>,
    hess: DMatrix<f64>,
}

impl AllocationProblem {
    pub fn new(structure: CouplingStructure, alpha: Vec<f64>, model: VarianceModel) -> Result<Self> {
        structure.ensure_valid()?;
        check_len("alpha", structure.levels(), alpha.len())?;
        check_len("group costs", structure.num_groups(), structure.costs().len())?;
        check_len("variance model groups", structure.num_groups(), model.len())?;
        for k in 0..structure.num_groups() {
            check_len("variance model size", structure.group_size(k), model.size(k))?;
        }
        if alpha.iter().all(|&a| a == 0.0) {
            return Err(Error::InvalidArgument("alpha must not vanish".into()));
        }
        Ok(Self {
            structure,
            alpha,
            model,
            options: SolveOptions::default(),
        })
    }

    fn costs(&self) -> &[f64] {
        self.structure.costs()
    }

    pub fn cost(&self, m: &[u64]) -> f64 {
        m.iter().zip(self.costs()).map(|(&m, c)| m as f64 * c).sum()
    }

    /// Variance of the optimal estimator at integer sample sizes. Groups
    /// with fewer than [`VarianceModel::min_samples`] samples are unused;
    /// returns infinity when the used groups cannot represent `α`.
    pub fn variance(&self, m: &[u64]) -> Result<f64> {
        check_len("sample sizes", self.structure.num_groups(), m.len())?;
        let l = self.structure.levels();
        let mut phi = DMatrix::zeros(l, l);
        let mut covered = vec![false; l];
        for (k, &mk) in m.iter().enumerate() {
            if mk < self.model.min_samples() {
                continue;
            }
            let [c, _, _] = self.model.derivatives(k, mk as f64);
            let inv = invert_group(k, &c, &self.options, "")?;
            self.structure.scatter_add(k, &inv, &mut phi);
            for &lv in self.structure.group(k) {
                covered[lv] = true;
            }
        }
        if self
            .alpha
            .iter()
            .zip(&covered)
            .any(|(&a, &c)| a != 0.0 && !c)
        {
            return Ok(f64::INFINITY);
        }
        let idx: Vec<usize> = (0..l).filter(|&i| covered[i]).collect();
        let sub = DMatrix::from_fn(idx.len(), idx.len(), |a, b| phi[(idx[a], idx[b])]);
        let a = DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.alpha[i]));
        match linalg::spd_solve(&sub, &a) {
            Some(u) => Ok(a.dot(&u)),
            None => Err(Error::SingularPhi),
        }
    }

    /// Variance, gradient and Hessian in `m` at a continuous interior point.
    fn evaluate(&self, m: &[f64]) -> Option<Evaluation> {
        let s = &self.structure;
        let l = s.levels();
        let kk = s.num_groups();
        let mut phi = DMatrix::zeros(l, l);
        let mut parts = Vec::with_capacity(kk);
        for (k, &mk) in m.iter().enumerate() {
            let [c, d1, d2] = self.model.derivatives(k, mk);
            let q = linalg::spd_inverse(&c)?;
            s.scatter_add(k, &q, &mut phi);
            parts.push((q, d1, d2));
        }
        linalg::symmetrize(&mut phi);
        let chol = linalg::cholesky(&phi)?;
        let alpha = DVector::from_column_slice(&self.alpha);
        let u = chol.solve(&alpha);
        let f = alpha.dot(&u);
        if !(f.is_finite() && f > 0.0) {
            return None;
        }
        let mut grad = vec![0.0; kk];
        let mut a_vecs = DMatrix::zeros(l, kk);
        let mut diag = vec![0.0; kk];
        for (k, (q, d1, d2)) in parts.iter().enumerate() {
            let v = q * s.gather(k, &u);
            let d1v = d1 * &v;
            grad[k] = v.dot(&d1v);
            let w = -(q * &d1v);
            for (i, &lv) in s.group(k).iter().enumerate() {
                a_vecs[(lv, k)] += w[i];
            }
            diag[k] = v.dot(&(d2 * &v)) - 2.0 * linalg::quad_form(&d1v, q);
        }
        let solved = chol.solve(&a_vecs);
        let mut hess = a_vecs.tr_mul(&solved) * 2.0;
        for k in 0..kk {
            hess[(k, k)] += diag[k];
        }
        linalg::symmetrize(&mut hess);
        Some(Evaluation { f, grad, hess })
    }

    fn hf_groups(&self) -> Vec<usize> {
        self.structure
            .high_fidelity_indicator()
            .iter()
            .enumerate()
            .filter_map(|(k, &h)| h.then_some(k))
            .collect()
    }

    fn cheapest_hf(&self) -> usize {
        let c = self.costs();
        self.hf_groups()
            .into_iter()
            .min_by(|&a, &b| c[a].total_cmp(&c[b]))
            .expect("valid structures cover the finest level")
    }

    /// Solves the continuous relaxation at budget `b`.
    fn continuous(&self, b: f64) -> Result<(Vec<f64>, f64, f64)> {
        let c = self.costs().to_vec();
        let kk = c.len();
        let scale: Vec<f64> = c.iter().map(|ck| b / ck).collect();
        let lower: Vec<f64> = c.iter().map(|ck| self.model.lower() * ck / b).collect();
        let use_hf = matches!(self.model, VarianceModel::Mean(_));
        let hf = self.structure.high_fidelity_indicator();

        let slack = 1.0 - lower.iter().sum::<f64>();
        let hf0 = self.cheapest_hf();
        let hf_need = if use_hf { c[hf0] / b } else { 0.0 };
        if slack <= 0.0 || hf_need >= 1.0 {
            return Err(Error::Infeasible(format!(
                "budget {b} cannot pay the minimal sample sizes"
            )));
        }
        if slack < 1e-9 || 1.0 - hf_need < 1e-9 {
            return Err(Error::Infeasible("budget leaves no interior".into()));
        }

        // Strictly feasible start.
        let mut x: Vec<f64> = lower.iter().map(|l| l + slack / (2 * kk) as f64).collect();
        if use_hf {
            let hf_val = |x: &[f64]| (0..kk).filter(|&k| hf[k]).map(|k| x[k] * scale[k]).sum::<f64>();
            if hf_val(&x) <= 1.0 + 1e-12 {
                let target = 0.5 * (hf_need + 1.0);
                let rest = (1.0 - target) / 2.0 / kk.max(2) as f64;
                for (k, xk) in x.iter_mut().enumerate() {
                    *xk = if k == hf0 { target } else { rest };
                }
            }
        }

        let m_of = |x: &[f64]| -> Vec<f64> { x.iter().zip(&scale).map(|(a, s)| a * s).collect() };
        let f0 = self
            .evaluate(&m_of(&x))
            .ok_or(Error::SingularPhi)?
            .f;
        let ncon = (kk + 1 + usize::from(use_hf)) as f64;

        // Barrier objective value, gradient and Hessian in x.
        let barrier = |x: &[f64], t: f64, with_derivs: bool| -> Option<(f64, Vec<f64>, DMatrix<f64>)> {
            let total: f64 = x.iter().sum();
            if total >= 1.0 || x.iter().zip(&lower).any(|(a, l)| a <= l) {
                return None;
            }
            let hfv = if use_hf {
                let v = (0..kk).filter(|&k| hf[k]).map(|k| x[k] * scale[k]).sum::<f64>() - 1.0;
                if v <= 0.0 {
                    return None;
                }
                v
            } else {
                1.0
            };
            let ev = self.evaluate(&m_of(x))?;
            let mut val = t * ev.f / f0 - (1.0 - total).ln();
            for (a, l) in x.iter().zip(&lower) {
                val -= (a - l).ln();
            }
            if use_hf {
                val -= hfv.ln();
            }
            if !with_derivs {
                return Some((val, Vec::new(), DMatrix::zeros(0, 0)));
            }
            let mut g = vec![0.0; kk];
            let mut h = DMatrix::zeros(kk, kk);
            let rb = 1.0 / (1.0 - total);
            for j in 0..kk {
                g[j] = t * ev.grad[j] * scale[j] / f0 + rb - 1.0 / (x[j] - lower[j]);
                for k in 0..kk {
                    h[(j, k)] = t * ev.hess[(j, k)] * scale[j] * scale[k] / f0 + rb * rb;
                    if use_hf && hf[j] && hf[k] {
                        h[(j, k)] += scale[j] * scale[k] / (hfv * hfv);
                    }
                }
                h[(j, j)] += 1.0 / (x[j] - lower[j]).powi(2);
                if use_hf && hf[j] {
                    g[j] -= scale[j] / hfv;
                }
            }
            Some((val, g, h))
        };

        let mut t = 1.0;
        loop {
            for _ in 0..200 {
                let (val, g, mut h) = barrier(&x, t, true).ok_or(Error::SingularPhi)?;
                let gv = DVector::from_vec(g.clone());
                let mut step = None;
                let mut shift = 0.0;
                let dmax = h.diagonal().max().max(1e-300);
                for _ in 0..20 {
                    if let Some(ch) = h.clone().cholesky() {
                        step = Some(-ch.solve(&gv));
                        break;
                    }
                    shift = if shift == 0.0 { 1e-10 * dmax } else { shift * 10.0 };
                    for k in 0..kk {
                        h[(k, k)] += shift;
                    }
                }
                let Some(dx) = step else { break };
                let dec = -gv.dot(&dx);
                if dec / 2.0 < 1e-14 {
                    break;
                }
                let mut a = 1.0;
                let mut moved = false;
                for _ in 0..60 {
                    let trial: Vec<f64> = x.iter().zip(dx.iter()).map(|(xi, di)| xi + a * di).collect();
                    if let Some((v, _, _)) = barrier(&trial, t, false) {
                        if v <= val - 0.25 * a * dec {
                            x = trial;
                            moved = true;
                            break;
                        }
                    }
                    a *= 0.5;
                }
                if !moved {
                    break;
                }
            }
            if ncon / t < 1e-11 {
                break;
            }
            t *= 10.0;
        }

        let m = m_of(&x);
        let ev = self.evaluate(&m).ok_or(Error::SingularPhi)?;
        let gx: Vec<f64> = ev.grad.iter().zip(&scale).map(|(g, s)| g * s).collect();
        let gmin = gx.iter().copied().fold(f64::INFINITY, f64::min);
        let kkt = (0..kk)
            .map(|k| (x[k] - lower[k]) * (gx[k] - gmin) / ev.f)
            .fold(0.0, f64::max);
        Ok((m, ev.f, kkt))
    }

    /// Minimal integer sample sizes: the required minimum per group, or
    /// one sample of the cheapest high-fidelity group.
    fn minimal(&self) -> Vec<u64> {
        match self.model {
            VarianceModel::Mean(_) => {
                let mut m = vec![0; self.structure.num_groups()];
                m[self.cheapest_hf()] = 1;
                m
            }
            VarianceModel::Covariance(_) => vec![2; self.structure.num_groups()],
        }
    }

    fn has_hf_sample(&self, m: &[u64]) -> bool {
        self.hf_groups().iter().any(|&k| m[k] >= self.model.min_samples())
    }

    /// Greedily adds samples with the best variance decrease per unit cost
    /// while the budget allows.
    fn refill(&self, m: &mut [u64], b: f64) -> Result<f64> {
        let c = self.costs();
        let mut v = self.variance(m)?;
        loop {
            let spent = self.cost(m);
            let mut best: Option<(usize, f64, f64)> = None;
            for k in 0..m.len() {
                if spent + c[k] > b * (1.0 + 1e-12) {
                    continue;
                }
                let step = if m[k] == 0 { self.model.min_samples() } else { 1 };
                if spent + step as f64 * c[k] > b * (1.0 + 1e-12) {
                    continue;
                }
                m[k] += step;
                let nv = self.variance(m)?;
                m[k] -= step;
                let gain = (v - nv) / (step as f64 * c[k]);
                if v.is_infinite() && nv.is_finite() || gain > 0.0 && (v - nv) > 1e-14 * v {
                    let score = if v.is_infinite() { f64::INFINITY } else { gain };
                    if best.is_none_or(|(_, s, _)| score > s) {
                        best = Some((k, score, nv));
                    }
                }
            }
            match best {
                Some((k, _, nv)) => {
                    m[k] += if m[k] == 0 { self.model.min_samples() } else { 1 };
                    v = nv;
                }
                None => return Ok(v),
            }
        }
    }

    /// Minimizes the variance subject to `Σ m_k c_k ≤ b` and at least one
    /// sample of a group containing the finest level.
    pub fn allocate_budget(&self, b: f64) -> Result<Allocation> {
        if !(b > 0.0 && b.is_finite()) {
            return Err(Error::InvalidArgument("budget must be positive".into()));
        }
        let minimal = self.minimal();
        if self.cost(&minimal) > b * (1.0 + 1e-12) {
            return Err(Error::Infeasible(format!(
                "budget {b} is below the cost {} of the smallest admissible allocation",
                self.cost(&minimal)
            )));
        }
        let (m_cont, v_cont, kkt) = match self.continuous(b) {
            Ok(r) => r,
            Err(Error::Infeasible(_)) => {
                let mut m = minimal.clone();
                let v = self.refill(&mut m, b)?;
                let mf = minimal.iter().map(|&x| x as f64).collect();
                let v0 = self.variance(&minimal)?;
                return Ok(self.finish(m, v, mf, v0.min(v), 0.0));
            }
            Err(e) => return Err(e),
        };
        let mut m: Vec<u64> = m_cont.iter().map(|x| x.floor().max(0.0) as u64).collect();
        if let VarianceModel::Covariance(_) = self.model {
            m.iter_mut().for_each(|x| *x = (*x).max(2));
        }
        if !self.has_hf_sample(&m) {
            let k = self.cheapest_hf();
            m[k] = m[k].max(self.model.min_samples());
        }
        // The previous adjustments can overshoot; give samples back where
        // they hurt the least.
        while self.cost(&m) > b * (1.0 + 1e-12) {
            let mut best: Option<(usize, f64)> = None;
            for k in 0..m.len() {
                let floor = if let VarianceModel::Covariance(_) = self.model { 2 } else { 0 };
                if m[k] <= floor {
                    continue;
                }
                m[k] -= 1;
                let keeps_hf = self.has_hf_sample(&m);
                m[k] += 1;
                if !keeps_hf {
                    continue;
                }
                m[k] -= 1;
                let v = self.variance(&m)?;
                m[k] += 1;
                if best.is_none_or(|(_, bv)| v < bv) {
                    best = Some((k, v));
                }
            }
            let (k, _) = best.ok_or_else(|| Error::Infeasible("cannot round within budget".into()))?;
            m[k] -= 1;
        }
        self.refill(&mut m, b)?;
        let v = self.improve(&mut m, b)?;
        Ok(self.finish(m, v, m_cont, v_cont, kkt))
    }

    /// Local search after rounding: take samples away from one group, give
    /// the freed budget to another and refill; keep the best strict
    /// improvement until none is left.
    fn improve(&self, m: &mut Vec<u64>, b: f64) -> Result<f64> {
        let c = self.costs().to_vec();
        let floor = match self.model {
            VarianceModel::Mean(_) => 0,
            VarianceModel::Covariance(_) => 2,
        };
        let mut v = self.variance(m)?;
        for _ in 0..IMPROVE_ROUNDS {
            let mut best: Option<(Vec<u64>, f64)> = None;
            for j in 0..m.len() {
                if m[j] <= floor {
                    continue;
                }
                for k in 0..m.len() {
                    let mut trial = m.clone();
                    if k != j {
                        let step = if trial[k] == 0 { self.model.min_samples() } else { 1 };
                        let need = (step as f64 * c[k] - (b - self.cost(&trial))).max(0.0);
                        let give = ((need / c[j]) * (1.0 + 1e-12)).ceil().max(1.0) as u64;
                        if trial[j] < give || trial[j] - give < floor {
                            continue;
                        }
                        trial[j] -= give;
                        if trial[j] > 0 && trial[j] < self.model.min_samples() {
                            trial[j] = 0;
                        }
                        trial[k] += step;
                    } else {
                        trial[j] -= 1;
                        if trial[j] > 0 && trial[j] < self.model.min_samples() {
                            trial[j] = 0;
                        }
                    }
                    if self.cost(&trial) > b * (1.0 + 1e-12) || !self.has_hf_sample(&trial) {
                        continue;
                    }
                    let tv = self.refill(&mut trial, b)?;
                    if tv < v * (1.0 - 1e-13) && best.as_ref().is_none_or(|(_, bv)| tv < *bv) {
                        best = Some((trial, tv));
                    }
                }
            }
            match best {
                Some((trial, tv)) => {
                    *m = trial;
                    v = tv;
                }
                None => break,
            }
        }
        Ok(v)
    }

    fn finish(&self, samples: Vec<u64>, variance: f64, cont: Vec<f64>, v_cont: f64, kkt: f64) -> Allocation {
        Allocation {
            cost: self.cost(&samples),
            gap: (variance - v_cont) / v_cont,
            samples,
            variance,
            continuous_samples: cont,
            continuous_variance: v_cont,
            kkt_residual: kkt,
        }
    }

    /// Minimizes the cost subject to a variance of at most `ε²`.
    pub fn allocate_target(&self, epsilon: f64) -> Result<Allocation> {
        let target = epsilon * epsilon;
        if !(target > 0.0 && target.is_finite()) {
            return Err(Error::Unreachable {
                target,
                reason: "the target accuracy must be positive".into(),
            });
        }
        let minimal = self.minimal();
        let v_min = self.variance(&minimal)?;
        if v_min <= target {
            return Ok(self.finish(minimal.clone(), v_min, minimal.iter().map(|&x| x as f64).collect(), v_min, 0.0));
        }
        let (m_cont, v_cont, kkt) = match self.model {
            VarianceModel::Mean(_) => {
                // The variance is homogeneous of degree −1 in m: solve once
                // at a reference budget and rescale.
                let b_ref = 1e6 * self.costs().iter().sum::<f64>();
                let (m, v, kkt) = self.continuous(b_ref)?;
                let s = v / target;
                (m.iter().map(|x| x * s).collect::<Vec<_>>(), target, kkt)
            }
            VarianceModel::Covariance(_) => {
                let mut lo = self.cost(&minimal);
                let mut hi = 2.0 * lo;
                let mut at_hi = self.continuous(hi)?;
                let mut doublings = 0;
                while at_hi.1 > target {
                    lo = hi;
                    hi *= 2.0;
                    doublings += 1;
                    if doublings > 80 {
                        return Err(Error::Unreachable {
                            target,
                            reason: "no finite budget reaches the target".into(),
                        });
                    }
                    at_hi = self.continuous(hi)?;
                }
                for _ in 0..60 {
                    if (hi - lo) <= 1e-7 * hi {
                        break;
                    }
                    let mid = 0.5 * (lo + hi);
                    match self.continuous(mid) {
                        Ok(r) if r.1 <= target => {
                            hi = mid;
                            at_hi = r;
                        }
                        _ => lo = mid,
                    }
                }
                at_hi
            }
        };
        let floor_min = match self.model {
            VarianceModel::Mean(_) => 0,
            VarianceModel::Covariance(_) => 2,
        };
        let mut m: Vec<u64> = m_cont
            .iter()
            .map(|&x| {
                let r = x.round();
                // Avoid paying for tiny relaxation residues.
                let c = if (x - r).abs() < 1e-9 * x.max(1.0) { r } else { x.ceil() };
                (c as u64).max(floor_min)
            })
            .collect();
        if !self.has_hf_sample(&m) {
            let k = self.cheapest_hf();
            m[k] = m[k].max(self.model.min_samples());
        }
        let c = self.costs().to_vec();
        let mut v = self.variance(&m)?;
        while v > target {
            let mut best: Option<(usize, f64, f64)> = None;
            for k in 0..m.len() {
                let step = if m[k] == 0 { self.model.min_samples() } else { 1 };
                m[k] += step;
                let nv = self.variance(&m)?;
                m[k] -= step;
                let score = (v - nv) / (step as f64 * c[k]);
                if best.is_none_or(|(_, s, _)| score > s) {
                    best = Some((k, score, nv));
                }
            }
            let (k, _, nv) = best.expect("at least one group");
            m[k] += if m[k] == 0 { self.model.min_samples() } else { 1 };
            v = nv;
        }
        loop {
            let mut best: Option<(usize, f64)> = None;
            for k in 0..m.len() {
                if m[k] == 0 {
                    continue;
                }
                let step = if m[k] == self.model.min_samples() { m[k] } else { 1 };
                if floor_min > 0 && m[k] - step < floor_min {
                    continue;
                }
                m[k] -= step;
                let ok = self.has_hf_sample(&m) && self.variance(&m)? <= target;
                m[k] += step;
                if ok && best.is_none_or(|(j, _)| step as f64 * c[k] > c[j]) {
                    best = Some((k, self.variance(&m)?));
                }
            }
            match best {
                Some((k, _)) => {
                    let step = if m[k] == self.model.min_samples() { m[k] } else { 1 };
                    m[k] -= step;
                }
                None => break,
            }
        }
        let v = self.variance(&m)?;
        Ok(self.finish(m, v, m_cont, v_cont, kkt))
    }

    pub fn allocate(&self, mode: AllocationMode) -> Result<Allocation> {
        match mode {
            AllocationMode::Budget(b) => self.allocate_budget(b),
            AllocationMode::Target(e) => self.allocate_target(e),
        }
    }

    /// Equal share of the budget per group, `m_k = ⌊b / (K c_k)⌋`.
    pub fn uniform_cost_allocation(&self, b: f64) -> Vec<u64> {
        let k = self.structure.num_groups() as f64;
        self.costs()
            .iter()
            .map(|c| (b / (k * c)).floor() as u64)
            .collect()
    }

    /// Continuous optimum at budget `b` (sample sizes, variance, KKT
    /// residual).
    pub fn continuous_optimum(&self, b: f64) -> Result<(Vec<f64>, f64, f64)> {
        self.continuous(b)
    }
}

/// Pointwise fourth moments entering the MLMC covariance bound: for every
/// group `k` of the MLMC pattern and element `i`, `𝕄⁴[Δ_{k,i}]` and
/// `𝕄⁴[Σ_{k,i}]` where `Δ = Z_ℓ − Z_{ℓ−1}`, `Σ = Z_ℓ + Z_{ℓ−1}` (for the
/// first group, both are `Z_1`).
#[derive(Debug, Clone, PartialEq)]
pub struct MlmcBoundInputs {
    pub delta_fourth: Vec<Vec<f64>>,
    pub sum_fourth: Vec<Vec<f64>>,
}

impl MlmcBoundInputs {
    /// Sample fourth moments from an ensemble coupling all levels.
    pub fn from_samples(samples: &GroupSamples) -> Result<Self> {
        let levels = samples.levels().len();
        let n = samples.sizes().first().copied().unwrap_or(0);
        let combine = |l: usize, sign: f64, i: usize| -> Vec<f64> {
            let a = samples.column(l, i);
            if l == 0 {
                return a;
            }
            let b = samples.column(l - 1, i);
            a.iter().zip(&b).map(|(x, y)| x + sign * y).collect()
        };
        let fourth = |sign: f64| -> Result<Vec<Vec<f64>>> {
            (0..levels)
                .map(|l| {
                    (0..n)
                        .map(|i| {
                            let x = combine(l, sign, i);
                            mc_fourth(&x, &x, &x, &x)
                        })
                        .collect()
                })
                .collect()
        };
        Ok(Self {
            delta_fourth: fourth(-1.0)?,
            sum_fourth: fourth(1.0)?,
        })
    }

    /// `(Σᵢ √𝕄⁴[Δ_i]) (Σᵢ √𝕄⁴[Σ_i])` for every group.
    pub fn bounds(&self) -> Result<Vec<f64>> {
        self.delta_fourth
            .iter()
            .zip(&self.sum_fourth)
            .enumerate()
            .map(|(k, (d, s))| {
                if let Some(&v) = d.iter().chain(s).find(|v| !(**v >= 0.0)) {
                    return Err(Error::NegativeBound { group: k, value: v });
                }
                let a: f64 = d.iter().map(|v| v.sqrt()).sum();
                let b: f64 = s.iter().map(|v| v.sqrt()).sum();
                Ok(a * b)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlmcCovAllocation {
    pub samples: Vec<u64>,
    pub cost: f64,
    /// Per-group bounds `bound_k`; the contribution of group `k` is at most
    /// `bound_k / (m_k − 1)`.
    pub bounds: Vec<f64>,
    pub bound_variance: f64,
    /// Exact variance of the MLMC estimator at `samples`, when the exact
    /// covariance-of-covariance models were supplied.
    pub exact_variance: Option<f64>,
    pub exact_contributions: Option<Vec<f64>>,
}

/// Minimizes `Σ_k bound_k / (m_k − 1)` under `Σ m_k c_k ≤ b`, `m_k ≥ 2`:
/// `m_k − 1 ∝ √(bound_k / c_k)`, with groups clamped at the minimum
/// removed from the proportional share, then floored and refilled.
pub fn mlmc_cov_allocation(
    structure: &CouplingStructure,
    inputs: &MlmcBoundInputs,
    budget: f64,
    exact: Option<&[CovCovModel]>,
) -> Result<MlmcCovAllocation> {
    structure.ensure_valid()?;
    if !structure.is_mlmc() {
        return Err(Error::InvalidArgument(
            "the MLMC covariance allocation needs the MLMC coupling pattern".into(),
        ));
    }
    let k = structure.num_groups();
    let c = structure.costs();
    check_len("group costs", k, c.len())?;
    check_len("bound inputs", k, inputs.delta_fourth.len())?;
    check_len("bound inputs", k, inputs.sum_fourth.len())?;
    let bounds = inputs.bounds()?;
    let base: f64 = 2.0 * c.iter().sum::<f64>();
    if base > budget * (1.0 + 1e-12) {
        return Err(Error::Infeasible(format!(
            "budget {budget} is below the cost {base} of two samples per group"
        )));
    }
    // y_k = m_k − 1 ≥ 1 with Σ c_k y_k ≤ budget − Σ c_k.
    let avail = budget - c.iter().sum::<f64>();
    let mut fixed = vec![false; k];
    let mut y = vec![1.0; k];
    loop {
        let free_budget = avail - (0..k).filter(|&j| fixed[j]).map(|j| c[j]).sum::<f64>();
        let denom: f64 = (0..k)
            .filter(|&j| !fixed[j])
            .map(|j| (bounds[j] * c[j]).sqrt())
            .sum();
        let mut changed = false;
        for j in 0..k {
            if fixed[j] {
                continue;
            }
            y[j] = if denom > 0.0 {
                (bounds[j] / c[j]).sqrt() * free_budget / denom
            } else {
                1.0
            };
            if y[j] < 1.0 {
                fixed[j] = true;
                y[j] = 1.0;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let mut m: Vec<u64> = y.iter().map(|v| (v + 1.0).floor().max(2.0) as u64).collect();
    let objective = |m: &[u64]| -> f64 {
        bounds
            .iter()
            .zip(m)
            .map(|(b, &mk)| b / (mk as f64 - 1.0))
            .sum()
    };
    let cost = |m: &[u64]| m.iter().zip(c).map(|(&x, ck)| x as f64 * ck).sum::<f64>();
    while cost(&m) > budget * (1.0 + 1e-12) {
        let j = (0..k)
            .filter(|&j| m[j] > 2)
            .min_by(|&a, &b| {
                let da = bounds[a] / (m[a] as f64 - 2.0) - bounds[a] / (m[a] as f64 - 1.0);
                let db = bounds[b] / (m[b] as f64 - 2.0) - bounds[b] / (m[b] as f64 - 1.0);
                da.total_cmp(&db)
            })
            .ok_or_else(|| Error::Infeasible("cannot round within budget".into()))?;
        m[j] -= 1;
    }
    loop {
        let spent = cost(&m);
        let best = (0..k)
            .filter(|&j| spent + c[j] <= budget * (1.0 + 1e-12))
            .map(|j| {
                let gain = bounds[j] / (m[j] as f64 - 1.0) - bounds[j] / m[j] as f64;
                (j, gain / c[j])
            })
            .filter(|(_, g)| *g > 0.0)
            .max_by(|a, b| a.1.total_cmp(&b.1));
        match best {
            Some((j, _)) => m[j] += 1,
            None => {
                // Spend leftovers even when all bounds vanish.
                match (0..k).find(|&j| spent + c[j] <= budget * (1.0 + 1e-12) && bounds.iter().all(|b| *b == 0.0)) {
                    Some(j) => m[j] += 1,
                    None => break,
                }
            }
        }
    }
    let (exact_variance, exact_contributions) = match exact {
        Some(models) => {
            check_len("exact models", k, models.len())?;
            let contrib = models
                .iter()
                .zip(&m)
                .enumerate()
                .map(|(j, (model, &mk))| {
                    let cm = model.at(mk as f64)?;
                    let beta = if j == 0 {
                        DVector::from_vec(vec![1.0])
                    } else {
                        DVector::from_vec(vec![-1.0, 1.0])
                    };
                    Ok(linalg::quad_form(&beta, &cm))
                })
                .collect::<Result<Vec<f64>>>()?;
            (Some(contrib.iter().sum()), Some(contrib))
        }
        None => (None, None),
    };
    Ok(MlmcCovAllocation {
        cost: cost(&m),
        bound_variance: objective(&m),
        samples: m,
        bounds,
        exact_variance,
        exact_contributions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn single(c: f64, s2: f64) -> AllocationProblem {
        AllocationProblem::new(
            CouplingStructure::single_group(1).with_costs(vec![c]),
            vec![1.0],
            VarianceModel::Mean(vec![DMatrix::from_element(1, 1, s2)]),
        )
        .unwrap()
    }

    #[test]
    fn single_level_budget_is_floor() {
        for (c, b) in [(1.0, 10.0), (0.3, 10.0), (2.5, 7.4), (1.0, 1.0)] {
            let a = single(c, 2.0).allocate_budget(b).unwrap();
            assert_eq!(a.samples, vec![(b / c).floor() as u64], "c={c} b={b}");
        }
        assert!(matches!(single(2.0, 1.0).allocate_budget(1.0), Err(Error::Infeasible(_))));
    }

    #[test]
    fn single_level_target_is_ceil() {
        let p = single(1.0, 3.0);
        let a = p.allocate_target(0.1).unwrap();
        assert_eq!(a.samples, vec![300]);
        let a = p.allocate_target(0.07).unwrap();
        assert_eq!(a.samples, vec![(3.0f64 / 0.0049).ceil() as u64]);
    }

    #[test]
    fn uncorrelated_coarse_level_gets_nothing() {
        let s = CouplingStructure::new(2, vec![vec![0], vec![1]]).with_costs(vec![0.01, 1.0]);
        let p = AllocationProblem::new(
            s,
            vec![0.0, 1.0],
            VarianceModel::Mean(vec![
                DMatrix::from_element(1, 1, 1.0),
                DMatrix::from_element(1, 1, 1.0),
            ]),
        )
        .unwrap();
        let a = p.allocate_budget(50.0).unwrap();
        assert_eq!(a.samples, vec![0, 50]);
    }

    #[test]
    fn mlmc_bound_single_level() {
        let s = CouplingStructure::mlmc(1).with_costs(vec![2.0]);
        let inputs = MlmcBoundInputs {
            delta_fourth: vec![vec![3.0, 3.0]],
            sum_fourth: vec![vec![3.0, 3.0]],
        };
        let a = mlmc_cov_allocation(&s, &inputs, 21.0, None).unwrap();
        assert_eq!(a.samples, vec![10]);
        assert_relative_eq!(a.bounds[0], 12.0, max_relative = 1e-12);
    }

    #[test]
    fn zero_bound_group_stays_minimal() {
        let s = CouplingStructure::mlmc(2).with_costs(vec![1.0, 1.0]);
        let inputs = MlmcBoundInputs {
            delta_fourth: vec![vec![3.0], vec![0.0]],
            sum_fourth: vec![vec![3.0], vec![12.0]],
        };
        let a = mlmc_cov_allocation(&s, &inputs, 30.0, None).unwrap();
        assert_eq!(a.samples, vec![28, 2]);
    }

    #[test]
    fn negative_fourth_moment_is_rejected() {
        let s = CouplingStructure::mlmc(1).with_costs(vec![1.0]);
        let inputs = MlmcBoundInputs {
            delta_fourth: vec![vec![-1.0]],
            sum_fourth: vec![vec![1.0]],
        };
        assert!(matches!(
            mlmc_cov_allocation(&s, &inputs, 10.0, None),
            Err(Error::NegativeBound { .. })
        ));
    }
}
