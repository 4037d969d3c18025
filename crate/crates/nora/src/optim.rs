//! The optimizer family: Nora (canonical and reference-code variants),
//! Muon, RMNP, Mano, and a bias-corrected Adam for non-matrix parameters.
//!
//! All matrix variants share the same momentum recursion
//! `v_t = beta * v_{t-1} + (1 - beta) * g_t` with `v_0 = 0` and differ only
//! in how the update direction is produced from `v_t`:
//!
//! * Nora: row-perpendicular projection against the weight, then row
//!   normalization. Every nonzero direction row is orthogonal to the
//!   matching weight row, so with zero weight decay each row norm grows by
//!   exactly `eta^2` per step in the squared norm.
//! * RMNP: row normalization only (radial components survive).
//! * Muon: Newton-Schulz orthogonalization of `v_t / ||v_t||_F`.
//! * Mano: alternates the Nora pipeline between rows (odd calls) and
//!   columns (even calls).

use crate::error::{Error, Result};
use crate::geometry::{newton_schulz, row_normalize, row_perp_project_counted, ZERO_ROW_GUARD};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Algorithm form: project raw momentum against w, row-normalize.
    Nora,
    /// Reference-code form: Nesterov blend, projection against unit weight
    /// rows, eps-thresholded normalization, max(1, sqrt(m/n)) scale, and
    /// multiplicative decay before the step.
    NoraRef,
    Muon,
    Rmnp,
    Mano,
    Adam,
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Nora => "nora",
            Variant::NoraRef => "nora-ref",
            Variant::Muon => "muon",
            Variant::Rmnp => "rmnp",
            Variant::Mano => "mano",
            Variant::Adam => "adam",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        match s {
            "nora" => Ok(Variant::Nora),
            "nora-ref" | "nora_ref" => Ok(Variant::NoraRef),
            "muon" => Ok(Variant::Muon),
            "rmnp" => Ok(Variant::Rmnp),
            "mano" => Ok(Variant::Mano),
            "adam" => Ok(Variant::Adam),
            other => Err(Error::invalid(format!("unknown optimizer variant '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Hyper {
    pub variant: Variant,
    pub lr: f64,
    /// Momentum EMA coefficient beta (also the buffer EMA in the reference
    /// variant).
    pub momentum: f64,
    pub weight_decay: f64,
    /// Newton-Schulz iteration count (Muon only).
    pub ns_iters: usize,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    /// Row-normalization threshold: 0.0 is the exact-theory mode (denormal
    /// guard only); the reference variant uses 1e-10.
    pub rn_eps: f64,
    /// Nesterov-style blend coefficient of the reference variant
    /// (`m_t = g + blend * (buf - g)`).
    pub ref_blend: f64,
}

impl Hyper {
    pub fn new(variant: Variant, lr: f64) -> Hyper {
        Hyper {
            variant,
            lr,
            momentum: 0.95,
            weight_decay: 0.0,
            ns_iters: 5,
            adam_betas: (0.9, 0.95),
            adam_eps: 1e-10,
            rn_eps: if variant == Variant::NoraRef { 1e-10 } else { 0.0 },
            ref_blend: 0.95,
        }
    }

    pub fn nora(lr: f64) -> Hyper {
        Hyper::new(Variant::Nora, lr)
    }

    pub fn nora_reference(lr: f64) -> Hyper {
        Hyper::new(Variant::NoraRef, lr)
    }

    pub fn muon(lr: f64) -> Hyper {
        Hyper::new(Variant::Muon, lr)
    }

    pub fn rmnp(lr: f64) -> Hyper {
        Hyper::new(Variant::Rmnp, lr)
    }

    pub fn mano(lr: f64) -> Hyper {
        Hyper::new(Variant::Mano, lr)
    }

    pub fn adam(lr: f64) -> Hyper {
        Hyper::new(Variant::Adam, lr)
    }

    pub fn with_momentum(mut self, beta: f64) -> Hyper {
        self.momentum = beta;
        self
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Hyper {
        self.weight_decay = wd;
        self
    }

    pub fn with_ns_iters(mut self, iters: usize) -> Hyper {
        self.ns_iters = iters;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::invalid("lr must be finite and > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must be in [0, 1)"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight_decay must be finite and >= 0"));
        }
        if self.ns_iters == 0 {
            return Err(Error::invalid("ns_iters must be >= 1"));
        }
        let (b1, b2) = self.adam_betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::invalid("adam betas must be in [0, 1)"));
        }
        if !(self.adam_eps.is_finite() && self.adam_eps > 0.0) {
            return Err(Error::invalid("adam_eps must be finite and > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct OptState {
    /// Step counter t; increments by exactly one per call.
    pub step: u64,
    /// Momentum buffer v_t, initialized to zero.
    pub momentum: Matrix,
    pub adam_m: Option<Matrix>,
    pub adam_v: Option<Matrix>,
    /// Mano only: false = row phase next, true = column phase next.
    pub parity: bool,
    /// Diagnostic: zero-norm weight rows passed through the projection.
    pub zero_weight_rows: u64,
    /// Diagnostic: Muon steps skipped because the momentum was zero.
    pub skipped_updates: u64,
}

impl OptState {
    pub fn new(rows: usize, cols: usize) -> OptState {
        OptState {
            step: 0,
            momentum: Matrix::zeros(rows, cols),
            adam_m: None,
            adam_v: None,
            parity: false,
            zero_weight_rows: 0,
            skipped_updates: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct StepStats {
    pub zero_weight_rows: usize,
    pub skipped: bool,
}

/// Canonical Nora direction: `(v_perp, d, zero_weight_rows)` where
/// `v_perp` is the row-perpendicular projection of `v` against `w` and
/// `d = RN(v_perp)`.
pub fn nora_direction(v: &Matrix, w: &Matrix, rn_eps: f64) -> Result<(Matrix, Matrix, usize)> {
    let (v_perp, zero_rows) = row_perp_project_counted(v, w)?;
    let d = row_normalize(&v_perp, rn_eps);
    Ok((v_perp, d, zero_rows))
}

fn update_momentum(state: &mut OptState, grad: &Matrix, beta: f64) -> Result<()> {
    state.momentum.same_shape(grad)?;
    state.momentum.scale_in_place(beta);
    state.momentum.axpy(1.0 - beta, grad)?;
    Ok(())
}

/// `w <- (1 - lr * wd) w - lr * d`, the Algorithm-1 coupled form. With
/// `wd = 0` the scale is exactly 1.0 and no bits move besides the step.
fn apply_direction(weight: &mut Matrix, d: &Matrix, lr: f64, wd: f64) -> Result<()> {
    if wd != 0.0 {
        weight.scale_in_place(1.0 - lr * wd);
    }
    weight.axpy(-lr, d)
}

/// Advance one optimizer step in place. Dispatches on `hyper.variant`.
pub fn apply_step(
    weight: &mut Matrix,
    grad: &Matrix,
    hyper: &Hyper,
    state: &mut OptState,
) -> Result<StepStats> {
    weight.same_shape(grad)?;
    let mut stats = StepStats::default();
    match hyper.variant {
        Variant::Nora => {
            update_momentum(state, grad, hyper.momentum)?;
            let (_, d, zero_rows) = nora_direction(&state.momentum, weight, hyper.rn_eps)?;
            stats.zero_weight_rows = zero_rows;
            state.zero_weight_rows += zero_rows as u64;
            apply_direction(weight, &d, hyper.lr, hyper.weight_decay)?;
        }
        Variant::NoraRef => {
            // buf <- buf + (1 - beta)(g - buf)
            let mut buf = state.momentum.clone();
            let delta = grad.sub(&buf)?;
            buf.axpy(1.0 - hyper.momentum, &delta)?;
            state.momentum = buf.clone();
            // m_t = g + blend * (buf - g)
            let mut m_t = grad.clone();
            let blend_delta = buf.sub(grad)?;
            m_t.axpy(hyper.ref_blend, &blend_delta)?;
            // Project against row-normalized weights.
            let theta_hat = row_normalize(weight, hyper.rn_eps);
            let dots = m_t.row_dot(&theta_hat)?;
            let mut v = m_t;
            for i in 0..v.rows() {
                let coeff = dots[i];
                let th = theta_hat.row(i);
                if th.iter().all(|&t| t == 0.0) {
                    stats.zero_weight_rows += 1;
                }
                let vr = v.row_mut(i);
                for (o, &t) in vr.iter_mut().zip(th) {
                    *o -= coeff * t;
                }
            }
            state.zero_weight_rows += stats.zero_weight_rows as u64;
            let v_hat = row_normalize(&v, hyper.rn_eps);
            let scale = (weight.rows() as f64 / weight.cols() as f64).sqrt().max(1.0);
            if hyper.weight_decay > 0.0 {
                weight.scale_in_place(1.0 - hyper.lr * hyper.weight_decay);
            }
            weight.axpy(-hyper.lr * scale, &v_hat)?;
        }
        Variant::Muon => {
            update_momentum(state, grad, hyper.momentum)?;
            let v_norm = state.momentum.norm_fro();
            if v_norm <= ZERO_ROW_GUARD {
                stats.skipped = true;
                state.skipped_updates += 1;
                // d = 0; only decay applies.
                apply_direction(weight, &Matrix::zeros(weight.rows(), weight.cols()),
                                hyper.lr, hyper.weight_decay)?;
            } else {
                let x0 = state.momentum.scale(1.0 / v_norm);
                let d = newton_schulz(&x0, hyper.ns_iters);
                apply_direction(weight, &d, hyper.lr, hyper.weight_decay)?;
            }
        }
        Variant::Rmnp => {
            update_momentum(state, grad, hyper.momentum)?;
            let d = row_normalize(&state.momentum, hyper.rn_eps);
            apply_direction(weight, &d, hyper.lr, hyper.weight_decay)?;
        }
        Variant::Mano => {
            update_momentum(state, grad, hyper.momentum)?;
            let d = if !state.parity {
                // Odd call: row-wise pipeline, identical to Nora.
                let (_, d, zero_rows) = nora_direction(&state.momentum, weight, hyper.rn_eps)?;
                stats.zero_weight_rows = zero_rows;
                d
            } else {
                // Even call: column-wise pipeline via the transpose.
                let vt = state.momentum.transpose();
                let wt = weight.transpose();
                let (_, dt, zero_rows) = nora_direction(&vt, &wt, hyper.rn_eps)?;
                stats.zero_weight_rows = zero_rows;
                dt.transpose()
            };
            state.zero_weight_rows += stats.zero_weight_rows as u64;
            state.parity = !state.parity;
            apply_direction(weight, &d, hyper.lr, hyper.weight_decay)?;
        }
        Variant::Adam => {
            let (b1, b2) = hyper.adam_betas;
            if state.adam_m.is_none() {
                state.adam_m = Some(Matrix::zeros(weight.rows(), weight.cols()));
                state.adam_v = Some(Matrix::zeros(weight.rows(), weight.cols()));
            }
            let m = state.adam_m.as_mut().unwrap();
            let v = state.adam_v.as_mut().unwrap();
            m.same_shape(grad)?;
            m.scale_in_place(b1);
            m.axpy(1.0 - b1, grad)?;
            v.scale_in_place(b2);
            v.axpy(1.0 - b2, &grad.hadamard(grad)?)?;
            let t = (state.step + 1) as i32;
            let bias1 = 1.0 - b1.powi(t);
            let bias2 = 1.0 - b2.powi(t);
            let step_size = hyper.lr * bias2.sqrt() / bias1;
            if hyper.weight_decay > 0.0 {
                weight.scale_in_place(1.0 - step_size * hyper.weight_decay);
            }
            for i in 0..weight.data().len() {
                let denom = v.data()[i].sqrt() + hyper.adam_eps;
                weight.data_mut()[i] -= step_size * m.data()[i] / denom;
            }
        }
    }
    state.step += 1;
    if !weight.is_finite() {
        return Err(Error::NonFinite("optimizer step"));
    }
    Ok(stats)
}

#[derive(Debug, Clone)]
pub struct ParamGroup {
    pub id: String,
    pub weight: Matrix,
    pub hyper: Hyper,
    pub state: OptState,
    pub is_matrix_param: bool,
}

impl ParamGroup {
    pub fn new(id: impl Into<String>, weight: Matrix, hyper: Hyper, is_matrix_param: bool) -> Result<ParamGroup> {
        hyper.validate()?;
        if !is_matrix_param && hyper.variant != Variant::Adam {
            return Err(Error::invalid(
                "non-matrix parameters must use the Adam variant",
            ));
        }
        let state = OptState::new(weight.rows(), weight.cols());
        Ok(ParamGroup {
            id: id.into(),
            weight,
            hyper,
            state,
            is_matrix_param,
        })
    }

    pub fn step(&mut self, grad: &Matrix) -> Result<StepStats> {
        apply_step(&mut self.weight, grad, &self.hyper, &mut self.state)
    }
}

/// A named parameter awaiting optimizer assignment. `ndim` is the logical
/// tensor rank: vectors and scalars are stored as 1 x n matrices but keep
/// their rank for routing.
#[derive(Debug, Clone)]
pub struct ParamDef {
    pub name: String,
    pub weight: Matrix,
    pub ndim: usize,
}

/// Routing rule for parameter groups: 2-D parameters go to the configured
/// matrix optimizer unless named like an embedding or output head.
pub fn is_matrix_routed(name: &str, ndim: usize) -> bool {
    ndim >= 2 && !name.contains("embed") && !name.contains("lm_head")
}

pub fn route_params(
    params: Vec<ParamDef>,
    matrix_hyper: &Hyper,
    adam_hyper: &Hyper,
) -> Result<Vec<ParamGroup>> {
    if adam_hyper.variant != Variant::Adam {
        return Err(Error::invalid("auxiliary hyper must be the Adam variant"));
    }
    params
        .into_iter()
        .map(|p| {
            if is_matrix_routed(&p.name, p.ndim) {
                ParamGroup::new(p.name, p.weight, matrix_hyper.clone(), true)
            } else {
                ParamGroup::new(p.name, p.weight, adam_hyper.clone(), false)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::dot;
    use crate::geometry::row_perp_project;
    use crate::rng::Rng;

    fn norm2_row(r: &[f64]) -> f64 {
        dot(r, r).sqrt()
    }

    #[test]
    fn nora_single_row_hand_example() {
        // beta = 0, lambda = 0, w = [1, 0], g = [1, 1], eta = 0.5
        let mut w = Matrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
        let hyper = Hyper::nora(0.5).with_momentum(0.0);
        let mut state = OptState::new(1, 2);
        let g = Matrix::from_vec(1, 2, vec![1.0, 1.0]).unwrap();
        apply_step(&mut w, &g, &hyper, &mut state).unwrap();
        assert_eq!(state.momentum.row(0), &[1.0, 1.0]);
        assert!((w.at(0, 0) - 1.0).abs() < 1e-15);
        assert!((w.at(0, 1) + 0.5).abs() < 1e-15);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn nora_zero_gradient_is_noop() {
        let mut rng = Rng::from_seed(17);
        let w0 = Matrix::random_normal(4, 6, 1.0, &mut rng);
        let mut w = w0.clone();
        let hyper = Hyper::nora(0.1);
        let mut state = OptState::new(4, 6);
        let g = Matrix::zeros(4, 6);
        apply_step(&mut w, &g, &hyper, &mut state).unwrap();
        assert_eq!(w, w0);
    }

    #[test]
    fn nora_pythagorean_row_growth() {
        let mut rng = Rng::from_seed(18);
        let mut w = Matrix::random_normal(8, 16, 1.0, &mut rng);
        let hyper = Hyper::nora(0.05);
        let mut state = OptState::new(8, 16);
        for _ in 0..20 {
            let g = Matrix::random_normal(8, 16, 1.0, &mut rng);
            let before: Vec<f64> = (0..8).map(|i| norm2_row(w.row(i))).collect();
            let w_before = w.clone();
            apply_step(&mut w, &g, &hyper, &mut state).unwrap();
            let (_, d, _) = nora_direction(&state.momentum, &w_before, 0.0).unwrap();
            for i in 0..8 {
                let after = norm2_row(w.row(i));
                let expected_growth = if norm2_row(d.row(i)) > 0.0 {
                    hyper.lr * hyper.lr
                } else {
                    0.0
                };
                assert!(
                    (after * after - before[i] * before[i] - expected_growth).abs() <= 1e-10,
                    "row {i}"
                );
                assert!(after >= before[i] - 1e-12, "monotone row norm growth");
            }
        }
    }

    #[test]
    fn nora_direction_scale_free_at_zero_momentum() {
        let mut rng = Rng::from_seed(19);
        let w = Matrix::random_normal(5, 7, 1.0, &mut rng);
        let g = Matrix::random_normal(5, 7, 1.0, &mut rng);
        let (_, d1, _) = nora_direction(&g, &w, 0.0).unwrap();
        let (_, d2, _) = nora_direction(&g.scale(37.5), &w, 0.0).unwrap();
        for (a, b) in d1.data().iter().zip(d2.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn nora_ref_square_matrix_matches_canonical_pipeline_of_blended_momentum() {
        let mut rng = Rng::from_seed(20);
        let w0 = Matrix::random_normal(6, 6, 1.0, &mut rng);
        let g = Matrix::random_normal(6, 6, 1.0, &mut rng);
        let hyper = Hyper::nora_reference(0.01);
        let mut w = w0.clone();
        let mut state = OptState::new(6, 6);
        apply_step(&mut w, &g, &hyper, &mut state).unwrap();
        // scale = max(1, sqrt(6/6)) = 1; recover direction from the delta.
        let delta = w0.sub(&w).unwrap().scale(1.0 / hyper.lr);
        // Canonical pipeline applied to the blended momentum m_t.
        let buf = g.scale(1.0 - hyper.momentum);
        let mut m_t = g.clone();
        m_t.axpy(hyper.ref_blend, &buf.sub(&g).unwrap()).unwrap();
        let d = row_normalize(&row_perp_project(&m_t, &w0).unwrap(), 1e-10);
        for (a, b) in delta.data().iter().zip(d.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn nora_ref_tall_matrix_scale_factor_two() {
        // m = 4n -> scale factor max(1, sqrt(4)) = 2, so each updated row
        // moves by exactly lr * 2 (weights have nonzero rows).
        let mut rng = Rng::from_seed(21);
        let w0 = Matrix::random_normal(8, 2, 1.0, &mut rng);
        let g = Matrix::random_normal(8, 2, 1.0, &mut rng);
        let hyper = Hyper::nora_reference(0.01);
        let mut w = w0.clone();
        let mut state = OptState::new(8, 2);
        apply_step(&mut w, &g, &hyper, &mut state).unwrap();
        let delta = w0.sub(&w).unwrap();
        for i in 0..8 {
            let step_len = norm2_row(delta.row(i));
            if step_len > 0.0 {
                assert!(
                    (step_len - hyper.lr * 2.0).abs() <= 1e-12,
                    "row {i}: {step_len}"
                );
            }
        }
    }

    #[test]
    fn nora_ref_first_step_blend_coefficient() {
        // beta = blend = 0.95, first step: buf = 0.05 g, m_t = 0.0975 g;
        // direction matches the canonical first step because RN cancels
        // the scalar.
        let mut rng = Rng::from_seed(22);
        let w0 = Matrix::random_normal(4, 4, 1.0, &mut rng);
        let g = Matrix::random_normal(4, 4, 1.0, &mut rng);

        let href = Hyper::nora_reference(0.01);
        let mut wref = w0.clone();
        let mut sref = OptState::new(4, 4);
        apply_step(&mut wref, &g, &href, &mut sref).unwrap();
        // Buffer after one step is 0.05 g.
        for (b, gg) in sref.momentum.data().iter().zip(g.data()) {
            assert!((b - 0.05 * gg).abs() <= 1e-14);
        }

        let hcan = Hyper::nora(0.01);
        let mut wcan = w0.clone();
        let mut scan = OptState::new(4, 4);
        apply_step(&mut wcan, &g, &hcan, &mut scan).unwrap();
        for (a, b) in wref.data().iter().zip(wcan.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn muon_zero_momentum_is_noop() {
        let mut rng = Rng::from_seed(23);
        let w0 = Matrix::random_normal(3, 5, 1.0, &mut rng);
        let mut w = w0.clone();
        let hyper = Hyper::muon(0.1);
        let mut state = OptState::new(3, 5);
        let stats = apply_step(&mut w, &Matrix::zeros(3, 5), &hyper, &mut state).unwrap();
        assert!(stats.skipped);
        assert_eq!(state.skipped_updates, 1);
        assert_eq!(w, w0);
        assert_eq!(state.step, 1, "step counter still increments");
    }

    #[test]
    fn muon_orthonormal_rows_are_ns_fixed_direction() {
        // v with orthonormal rows: v v^T = I, so NS acts as the scalar
        // recursion on the prescale factor and the direction is preserved.
        let v = Matrix::from_vec(2, 4, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let x0 = v.scale(1.0 / v.norm_fro());
        let d = newton_schulz(&x0, 5);
        let mut s = 1.0 / (2.0f64).sqrt();
        for _ in 0..5 {
            s = 0.5 * s * (3.0 - s * s);
        }
        for (a, b) in d.data().iter().zip(v.data()) {
            assert!((a - s * b).abs() <= 1e-6);
        }
    }

    #[test]
    fn rmnp_single_row_normalizes() {
        let mut w = Matrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
        let hyper = Hyper::rmnp(1.0).with_momentum(0.0);
        let mut state = OptState::new(1, 2);
        let g = Matrix::from_vec(1, 2, vec![3.0, 4.0]).unwrap();
        apply_step(&mut w, &g, &hyper, &mut state).unwrap();
        // d = [0.6, 0.8]; w' = [1,0] - [0.6, 0.8]
        assert!((w.at(0, 0) - 0.4).abs() < 1e-15);
        assert!((w.at(0, 1) + 0.8).abs() < 1e-15);
    }

    #[test]
    fn rmnp_keeps_radial_component_nora_removes_it() {
        let w = Matrix::from_vec(1, 2, vec![2.0, 0.0]).unwrap();
        let v = Matrix::from_vec(1, 2, vec![1.0, 1.0]).unwrap();
        let d_rmnp = row_normalize(&v, 0.0);
        let (_, d_nora, _) = nora_direction(&v, &w, 0.0).unwrap();
        let dot_rmnp = dot(d_rmnp.row(0), w.row(0));
        let dot_nora = dot(d_nora.row(0), w.row(0));
        assert!(dot_rmnp.abs() > 0.1, "RMNP keeps the radial direction");
        assert!(dot_nora.abs() <= 1e-12, "Nora zeroes it");
    }

    #[test]
    fn mano_odd_step_equals_nora() {
        let mut rng = Rng::from_seed(24);
        let w0 = Matrix::random_normal(4, 7, 1.0, &mut rng);
        let g = Matrix::random_normal(4, 7, 1.0, &mut rng);
        let mut w_mano = w0.clone();
        let mut s_mano = OptState::new(4, 7);
        apply_step(&mut w_mano, &g, &Hyper::mano(0.02), &mut s_mano).unwrap();
        let mut w_nora = w0.clone();
        let mut s_nora = OptState::new(4, 7);
        apply_step(&mut w_nora, &g, &Hyper::nora(0.02), &mut s_nora).unwrap();
        assert_eq!(w_mano, w_nora, "first (odd) Mano call is bitwise Nora");
    }

    #[test]
    fn mano_even_step_is_transpose_conjugated_nora() {
        let mut rng = Rng::from_seed(25);
        let w0 = Matrix::random_normal(4, 7, 1.0, &mut rng);
        let g1 = Matrix::random_normal(4, 7, 1.0, &mut rng);
        let g2 = Matrix::random_normal(4, 7, 1.0, &mut rng);
        let hyper = Hyper::mano(0.02);

        let mut w = w0.clone();
        let mut state = OptState::new(4, 7);
        apply_step(&mut w, &g1, &hyper, &mut state).unwrap();
        let w_after_1 = w.clone();
        let v_before_2 = state.momentum.clone();
        apply_step(&mut w, &g2, &hyper, &mut state).unwrap();

        // Transpose oracle for the even step.
        let beta = hyper.momentum;
        let mut v2 = v_before_2;
        v2.scale_in_place(beta);
        v2.axpy(1.0 - beta, &g2).unwrap();
        let (_, dt, _) = nora_direction(&v2.transpose(), &w_after_1.transpose(), 0.0).unwrap();
        let d = dt.transpose();
        let mut expect = w_after_1.clone();
        expect.axpy(-hyper.lr, &d).unwrap();
        assert_eq!(w, expect);
    }

    #[test]
    fn mano_consecutive_steps_differ_from_pure_row_pipeline() {
        let mut rng = Rng::from_seed(26);
        let w0 = Matrix::random_normal(5, 9, 1.0, &mut rng);
        let g = Matrix::random_normal(5, 9, 1.0, &mut rng);
        let mut w_mano = w0.clone();
        let mut s_mano = OptState::new(5, 9);
        let mut w_nora = w0.clone();
        let mut s_nora = OptState::new(5, 9);
        let hm = Hyper::mano(0.05);
        let hn = Hyper::nora(0.05);
        for _ in 0..2 {
            apply_step(&mut w_mano, &g, &hm, &mut s_mano).unwrap();
            apply_step(&mut w_nora, &g, &hn, &mut s_nora).unwrap();
        }
        let diff = w_mano.sub(&w_nora).unwrap().norm_fro();
        assert!(diff > 1e-6, "column phase must change the trajectory");
    }

    #[test]
    fn adam_first_step_magnitude_is_lr() {
        let mut w = Matrix::from_vec(1, 3, vec![0.0, 0.0, 0.0]).unwrap();
        let hyper = Hyper::adam(0.001);
        let mut state = OptState::new(1, 3);
        let g = Matrix::from_vec(1, 3, vec![10.0, -0.3, 1e4]).unwrap();
        apply_step(&mut w, &g, &hyper, &mut state).unwrap();
        for (j, &gv) in g.data().iter().enumerate() {
            let expect = -gv.signum() * hyper.lr;
            assert!(
                (w.at(0, j) - expect).abs() <= 1e-6 * hyper.lr.abs() + 1e-9,
                "coord {j}: {} vs {expect}",
                w.at(0, j)
            );
        }
    }

    #[test]
    fn adam_constant_gradient_moves_by_sign() {
        let mut w = Matrix::from_vec(1, 2, vec![0.0, 0.0]).unwrap();
        let hyper = Hyper::adam(0.01);
        let mut state = OptState::new(1, 2);
        let g = Matrix::from_vec(1, 2, vec![2.5, -0.7]).unwrap();
        for _ in 0..200 {
            apply_step(&mut w, &g, &hyper, &mut state).unwrap();
        }
        // Per-coordinate displacement approaches -sign(g) * lr per step.
        assert!(w.at(0, 0) < -0.01 * 150.0);
        assert!(w.at(0, 1) > 0.01 * 150.0);
    }

    #[test]
    fn adam_zero_gradient_zero_update() {
        let mut w = Matrix::from_vec(1, 2, vec![1.0, -2.0]).unwrap();
        let w0 = w.clone();
        let hyper = Hyper::adam(0.01);
        let mut state = OptState::new(1, 2);
        apply_step(&mut w, &Matrix::zeros(1, 2), &hyper, &mut state).unwrap();
        assert_eq!(w, w0);
    }

    #[test]
    fn routing_rules() {
        let hidden = ParamDef {
            name: "layers.0.fc".into(),
            weight: Matrix::zeros(64, 64),
            ndim: 2,
        };
        let bias = ParamDef {
            name: "layers.0.bias".into(),
            weight: Matrix::zeros(1, 64),
            ndim: 1,
        };
        let embed = ParamDef {
            name: "embed_tokens".into(),
            weight: Matrix::zeros(100, 64),
            ndim: 2,
        };
        let groups = route_params(
            vec![hidden, bias, embed],
            &Hyper::nora(0.01),
            &Hyper::adam(0.001),
        )
        .unwrap();
        assert!(groups[0].is_matrix_param);
        assert_eq!(groups[0].hyper.variant, Variant::Nora);
        assert!(!groups[1].is_matrix_param);
        assert_eq!(groups[1].hyper.variant, Variant::Adam);
        assert!(!groups[2].is_matrix_param);
        assert_eq!(groups[2].hyper.variant, Variant::Adam);
    }

    #[test]
    fn non_matrix_param_rejects_matrix_variant() {
        assert!(ParamGroup::new("b", Matrix::zeros(1, 4), Hyper::nora(0.1), false).is_err());
    }

    #[test]
    fn hyper_validation() {
        assert!(Hyper::nora(0.0).validate().is_err());
        assert!(Hyper::nora(0.1).with_momentum(1.0).validate().is_err());
        assert!(Hyper::nora(0.1).with_weight_decay(-0.1).validate().is_err());
        assert!(Hyper::nora(0.1).validate().is_ok());
    }
}
