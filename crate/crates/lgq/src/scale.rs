//! Learning the quantizer scale α by local error search.
//!
//! Instead of backpropagating through the quantizer, the scale is nudged
//! by comparing reconstruction error at three candidate scales — one
//! below α, α itself, and one above — and stepping toward the winner
//! with a synthetic gradient of magnitude α². The candidate spread starts
//! at {0.5α, α, 2α} and narrows over training: whenever an outer
//! candidate keeps winning at periodic check points, the spread parameter
//! z grows and pulls both outer candidates toward α. The fixed-grid
//! variant (z frozen at 0) serves as the ablation baseline.

use crate::error::{Error, Result};
use crate::quant::{QuantizerState, ALPHA_FLOOR};

/// How a quantizer's α is trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScaleRule {
    /// Candidate search with the narrowing-spread adaptation.
    Ssg,
    /// Candidate search frozen at the {0.5α, α, 2α} grid.
    LlsqGrid,
    /// α stays at its initialized value.
    Fixed,
}

/// Per-α-slot state for the narrowing candidate spread.
///
/// `z ∈ [0, 0.5]` shrinks the candidates `α(0.5+z)` and `2α(1−z)` toward
/// α. Every `iter_target` observations the current argmin is assessed;
/// `trigger_count` consecutive outer-candidate wins bump z by `z_step`
/// (clamped at 0.5, where both candidates coincide with α). A middle win
/// resets the streak, so at most one directional counter is ever nonzero.
#[derive(Clone, Debug, PartialEq)]
pub struct SsgState {
    pub z: f32,
    pub z_step: f32,
    pub iter_target: usize,
    pub trigger_count: usize,
    pub consecutive_left: usize,
    pub consecutive_right: usize,
    pub iters_since_check: usize,
}

impl SsgState {
    pub fn new(iter_target: usize) -> SsgState {
        SsgState {
            z: 0.0,
            z_step: 0.03125,
            iter_target: iter_target.max(1),
            trigger_count: 4,
            consecutive_left: 0,
            consecutive_right: 0,
            iters_since_check: 0,
        }
    }

    /// Records one iteration's argmin; at check points, advances the
    /// streaks and possibly narrows the spread.
    pub fn observe(&mut self, argmin: usize) {
        self.iters_since_check += 1;
        if self.iters_since_check < self.iter_target {
            return;
        }
        self.iters_since_check = 0;
        match argmin {
            0 => {
                self.consecutive_left += 1;
                self.consecutive_right = 0;
            }
            2 => {
                self.consecutive_right += 1;
                self.consecutive_left = 0;
            }
            _ => {
                self.consecutive_left = 0;
                self.consecutive_right = 0;
            }
        }
        if self.consecutive_left >= self.trigger_count
            || self.consecutive_right >= self.trigger_count
        {
            self.z = (self.z + self.z_step).min(0.5);
            self.consecutive_left = 0;
            self.consecutive_right = 0;
        }
    }
}

/// Synonym used by the trainer: observe-and-adapt on the state.
pub fn ssg_observe_and_adapt(state: &mut SsgState, argmin: usize) {
    state.observe(argmin);
}

/// Sum of squared reconstruction errors of `x` quantized at scale `s`.
fn sq_err_at(x: &[f32], s: f32, lo: i32, hi: i32) -> f64 {
    let mut acc = 0.0f64;
    for &v in x {
        let code = ((v / s).round() as i32).clamp(lo, hi);
        let dq = code as f32 * s;
        let d = v as f64 - dq as f64;
        acc += d * d;
    }
    acc
}

/// Reconstruction errors at the three candidate scales
/// `{α(0.5+z), α, 2α(1−z)}`; at z = 0 this is the {0.5α, α, 2α} grid.
pub fn candidate_errors(
    x: &[f32],
    alpha: f32,
    z: f32,
    q_min: i32,
    q_max: i32,
) -> Result<(f64, f64, f64)> {
    if x.is_empty() {
        return Err(Error::domain("candidate_errors", "empty slice"));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::domain(
            "candidate_errors",
            format!("scale {alpha} must be positive"),
        ));
    }
    if !(0.0..=0.5).contains(&z) {
        return Err(Error::domain(
            "candidate_errors",
            format!("z {z} outside [0, 0.5]"),
        ));
    }
    Ok((
        sq_err_at(x, alpha * (0.5 + z), q_min, q_max),
        sq_err_at(x, alpha, q_min, q_max),
        sq_err_at(x, 2.0 * alpha * (1.0 - z), q_min, q_max),
    ))
}

/// Index of the smallest error; ties involving the middle keep the
/// middle, a left/right tie keeps the left.
pub fn argmin_candidate(e_l: f64, e_m: f64, e_r: f64) -> usize {
    if e_m <= e_l && e_m <= e_r {
        1
    } else if e_l <= e_r {
        0
    } else {
        2
    }
}

/// Synthetic scale gradient `−α²·(argmin − 1)`: +α² when the smaller
/// candidate wins (descent shrinks α), −α² when the larger one wins,
/// zero when α itself is best.
pub fn ssg_gradient(e_l: f64, e_m: f64, e_r: f64, alpha: f32) -> f32 {
    -(alpha * alpha) * (argmin_candidate(e_l, e_m, e_r) as f32 - 1.0)
}

/// Fixed-grid baseline: identical to the search gradient with z = 0 and
/// no spread adaptation.
pub fn llsq_grid_gradient(x: &[f32], alpha: f32, q_min: i32, q_max: i32) -> Result<f32> {
    let (e_l, e_m, e_r) = candidate_errors(x, alpha, 0.0, q_min, q_max)?;
    Ok(ssg_gradient(e_l, e_m, e_r, alpha))
}

/// One scale-learning step over every channel slice of `data`
/// (channel-major layout; per-layer states see the whole tensor as one
/// slice): descend α by the synthetic gradient at rate `lr`, floor it,
/// and advance the spread state.
pub fn update_scales(
    state: &mut QuantizerState,
    data: &[f32],
    rule: ScaleRule,
    lr: f32,
) -> Result<()> {
    if rule == ScaleRule::Fixed {
        return Ok(());
    }
    let channels = state.channels();
    if data.is_empty() || data.len() % channels != 0 {
        return Err(Error::contract(
            "update_scales",
            format!("{} values do not split into {channels} channels", data.len()),
        ));
    }
    if rule == ScaleRule::Ssg && state.ssg.is_none() {
        return Err(Error::contract(
            "update_scales",
            "scale search state not enabled on this quantizer",
        ));
    }
    let chunk = data.len() / channels;
    let (lo, hi) = (state.q_min(), state.q_max());
    for c in 0..channels {
        let slice = &data[c * chunk..(c + 1) * chunk];
        let alpha = state.alpha[c];
        let g = match rule {
            ScaleRule::LlsqGrid => llsq_grid_gradient(slice, alpha, lo, hi)?,
            ScaleRule::Ssg => {
                let z = state.ssg.as_ref().expect("checked above")[c].z;
                let (e_l, e_m, e_r) = candidate_errors(slice, alpha, z, lo, hi)?;
                let argmin = argmin_candidate(e_l, e_m, e_r);
                state.ssg.as_mut().expect("checked above")[c].observe(argmin);
                -(alpha * alpha) * (argmin as f32 - 1.0)
            }
            ScaleRule::Fixed => unreachable!(),
        };
        state.alpha[c] = (alpha - lr * g).max(ALPHA_FLOOR);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::EstimatorConfig;

    #[test]
    fn candidate_errors_hand_values() {
        // input 0.6 is not exactly representable in f32, so allow the
        // representation error (~2.4e-8, squared into the sums) through
        let (e_l, e_m, e_r) = candidate_errors(&[0.6], 1.0, 0.0, -8, 7).unwrap();
        assert!((e_l - 0.01).abs() < 1e-7);
        assert!((e_m - 0.16).abs() < 1e-7);
        assert!((e_r - 0.36).abs() < 1e-7);
    }

    #[test]
    fn candidate_errors_on_grid_values() {
        // 2.0 is representable at all three scales {0.5, 1, 2}
        let (e_l, e_m, e_r) = candidate_errors(&[2.0], 1.0, 0.0, -8, 7).unwrap();
        assert_eq!((e_l, e_m, e_r), (0.0, 0.0, 0.0));
        // 1.0 is NOT representable at scale 2: 1/2 = 0.5 rounds away from
        // zero to code 1, reconstructing as 2.0
        let (e_l, e_m, e_r) = candidate_errors(&[1.0], 1.0, 0.0, -8, 7).unwrap();
        assert_eq!((e_l, e_m), (0.0, 0.0));
        assert!((e_r - 1.0).abs() < 1e-9);
        // zero reconstructs exactly everywhere
        let e = candidate_errors(&[0.0], 1.0, 0.0, -8, 7).unwrap();
        assert_eq!(e, (0.0, 0.0, 0.0));
    }

    #[test]
    fn candidate_errors_validates_inputs() {
        assert!(candidate_errors(&[], 1.0, 0.0, -8, 7).is_err());
        assert!(candidate_errors(&[1.0], 0.0, 0.0, -8, 7).is_err());
        assert!(candidate_errors(&[1.0], 1.0, 0.6, -8, 7).is_err());
    }

    #[test]
    fn gradient_is_signed_alpha_squared() {
        assert_eq!(ssg_gradient(0.5, 0.1, 0.9, 1.0), 0.0); // middle wins
        assert_eq!(ssg_gradient(0.1, 0.5, 0.9, 1.0), 1.0); // left wins
        assert_eq!(ssg_gradient(0.9, 0.5, 0.1, 0.5), -0.25); // right wins
        // ties keep the middle
        assert_eq!(ssg_gradient(0.5, 0.5, 0.9, 2.0), 0.0);
        assert_eq!(ssg_gradient(0.9, 0.5, 0.5, 2.0), 0.0);
    }

    #[test]
    fn spread_narrows_after_four_consecutive_outer_wins() {
        let mut s = SsgState::new(1);
        for _ in 0..3 {
            s.observe(0);
            assert_eq!(s.z, 0.0);
        }
        s.observe(0);
        assert_eq!(s.z, 0.03125);
        assert_eq!((s.consecutive_left, s.consecutive_right), (0, 0));
    }

    #[test]
    fn middle_win_resets_the_streak() {
        let mut s = SsgState::new(1);
        for _ in 0..3 {
            s.observe(0);
        }
        s.observe(1);
        assert_eq!((s.consecutive_left, s.z), (0, 0.0));
        for _ in 0..3 {
            s.observe(0);
        }
        assert_eq!(s.z, 0.0);
        s.observe(0);
        assert_eq!(s.z, 0.03125);
    }

    #[test]
    fn opposite_wins_reset_each_other() {
        let mut s = SsgState::new(1);
        for argmin in [0, 0, 2, 2, 0, 2, 2, 2] {
            s.observe(argmin);
            assert!(s.consecutive_left == 0 || s.consecutive_right == 0);
        }
        assert_eq!(s.z, 0.0);
        s.observe(2);
        assert_eq!(s.z, 0.03125);
    }

    #[test]
    fn z_clamps_at_half() {
        let mut s = SsgState::new(1);
        s.z = 0.49;
        for _ in 0..4 {
            s.observe(2);
        }
        assert_eq!(s.z, 0.5);
        for _ in 0..4 {
            s.observe(2);
        }
        assert_eq!(s.z, 0.5);
    }

    #[test]
    fn checks_happen_every_iter_target_iterations() {
        let mut s = SsgState::new(3);
        // 11 iterations = 3 checks; all argmin 0 but below trigger count
        for _ in 0..11 {
            s.observe(0);
        }
        assert_eq!(s.consecutive_left, 3);
        assert_eq!(s.z, 0.0);
        s.observe(0); // 12th iteration: 4th check fires the trigger
        assert_eq!(s.z, 0.03125);
    }

    #[test]
    fn fixed_grid_equals_search_at_zero_spread() {
        use rand::rngs::StdRng;
        use rand::{Rng, SeedableRng};
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..50 {
            let x: Vec<f32> = (0..64).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let alpha = rng.gen_range(0.05..2.0);
            let g_grid = llsq_grid_gradient(&x, alpha, -8, 7).unwrap();
            let (e_l, e_m, e_r) = candidate_errors(&x, alpha, 0.0, -8, 7).unwrap();
            let g_search = ssg_gradient(e_l, e_m, e_r, alpha);
            assert_eq!(g_grid.to_bits(), g_search.to_bits());
        }
    }

    #[test]
    fn update_scales_moves_channels_independently() {
        let mut q = QuantizerState::per_channel(4, true, EstimatorConfig::ste(), 2).unwrap();
        q.alpha = vec![1.0, 0.01];
        q.enable_ssg(1);
        // channel 0 holds tiny values (wants a smaller scale);
        // channel 1 holds large ones (wants a larger scale)
        let data: Vec<f32> = [[0.3f32, -0.2, 0.25, -0.3], [0.9, -0.8, 0.7, -0.9]].concat();
        update_scales(&mut q, &data, ScaleRule::Ssg, 0.1).unwrap();
        assert!(q.alpha[0] < 1.0, "channel 0 should shrink: {}", q.alpha[0]);
        assert!(q.alpha[1] > 0.01, "channel 1 should grow: {}", q.alpha[1]);
    }

    #[test]
    fn update_scales_requires_search_state() {
        let mut q = QuantizerState::per_layer(4, true, EstimatorConfig::ste()).unwrap();
        assert!(update_scales(&mut q, &[1.0], ScaleRule::Ssg, 0.1).is_err());
        assert!(update_scales(&mut q, &[1.0], ScaleRule::LlsqGrid, 0.1).is_ok());
        assert!(update_scales(&mut q, &[1.0], ScaleRule::Fixed, 0.1).is_ok());
    }

    #[test]
    fn alpha_never_collapses_below_floor() {
        let mut q = QuantizerState::per_layer(4, true, EstimatorConfig::ste()).unwrap();
        q.alpha = vec![1e-8];
        q.enable_ssg(1);
        for _ in 0..10 {
            update_scales(&mut q, &[1e-9, -1e-9], ScaleRule::Ssg, 10.0).unwrap();
            assert!(q.alpha[0] >= ALPHA_FLOOR);
        }
    }
}
