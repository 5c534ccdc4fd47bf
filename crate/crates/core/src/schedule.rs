//! Variance schedules and the closed-form DDPM / DDIM algebra.
//!
//! Steps are 1-based: `t` ranges over `1..=T` and `alpha_bar(0) == 1`.
//! All arithmetic is 64-bit.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    Linear,
}

/// Serialized form: arrays are recomputed on load.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: ScheduleKind,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            kind: ScheduleKind::Linear,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        match self.kind {
            ScheduleKind::Linear => linear_schedule(self.steps, self.beta_start, self.beta_end),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    spec: ScheduleSpec,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub fn linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(invalid("schedule needs at least one step"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(invalid(format!(
            "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let betas: Vec<f64> = if steps == 1 {
        vec![beta_start]
    } else {
        (0..steps)
            .map(|k| beta_start + (beta_end - beta_start) * k as f64 / (steps - 1) as f64)
            .collect()
    };
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for a in &alphas {
        acc *= a;
        alpha_bars.push(acc);
    }
    Ok(NoiseSchedule {
        spec: ScheduleSpec {
            steps,
            beta_start,
            beta_end,
            kind: ScheduleKind::Linear,
        },
        betas,
        alphas,
        alpha_bars,
    })
}

impl NoiseSchedule {
    pub fn spec(&self) -> &ScheduleSpec {
        &self.spec
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Cumulative product of `alpha` up to `t`; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(invalid(format!("step {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    /// `sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps`.
    pub fn q_sample(&self, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        self.check_step(t)?;
        if !x0.same_shape(eps) {
            return Err(invalid("q_sample: noise shape differs from x0"));
        }
        let ab = self.alpha_bar(t);
        let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(x0.zip_map(eps, |x, e| s * x + n * e))
    }

    /// One forward transition `q(x_t | x_{t-1})`:
    /// `sqrt(alpha_t) * x_prev + sqrt(beta_t) * eps`.
    pub fn q_step(&self, x_prev: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        self.check_step(t)?;
        if !x_prev.same_shape(eps) {
            return Err(invalid("q_step: noise shape differs from x_prev"));
        }
        let (s, n) = (self.alpha(t).sqrt(), self.beta(t).sqrt());
        Ok(x_prev.zip_map(eps, |x, e| s * x + n * e))
    }

    /// Predicted clean sample from a noise prediction.
    pub fn x0_from_eps(&self, x_t: &Tensor, eps: &Tensor, t: usize) -> Result<Tensor> {
        if !x_t.same_shape(eps) {
            return Err(invalid("x0_from_eps: shape mismatch"));
        }
        let ab = self.alpha_bar(t);
        if ab <= 0.0 {
            return Err(invalid("alpha_bar is zero; cannot invert"));
        }
        let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(x_t.zip_map(eps, |x, e| (x - n * e) / s))
    }

    /// Implied noise from a clean-sample prediction.
    pub fn eps_from_x0(&self, x_t: &Tensor, x0: &Tensor, t: usize) -> Result<Tensor> {
        if !x_t.same_shape(x0) {
            return Err(invalid("eps_from_x0: shape mismatch"));
        }
        let ab = self.alpha_bar(t);
        if ab >= 1.0 {
            return Err(invalid("alpha_bar is one; noise is undefined"));
        }
        let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(x_t.zip_map(x0, |x, x0| (x - s * x0) / n))
    }

    /// Per-step standard deviation that makes the generalized step a DDPM
    /// ancestral step, using cumulative products throughout.
    pub fn ddpm_sigma(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(ddpm_sigma_between(self.alpha_bar(t - 1), self.alpha_bar(t)))
    }

    /// One generalized reverse step from `t` to `t_prev`.
    pub fn ddim_step(
        &self,
        x_t: &Tensor,
        x0_pred: &Tensor,
        t: usize,
        t_prev: usize,
        sigma: f64,
        eps_draw: Option<&Tensor>,
    ) -> Result<Tensor> {
        self.check_step(t)?;
        if t_prev >= t {
            return Err(invalid(format!("t_prev = {t_prev} must be below t = {t}")));
        }
        ddim_update(
            self.alpha_bar(t),
            self.alpha_bar(t_prev),
            x_t,
            x0_pred,
            sigma,
            eps_draw,
        )
    }
}

/// `sqrt((1 - ab_prev) (1 - ab_t / ab_prev) / (1 - ab_t))`.
pub fn ddpm_sigma_between(ab_prev: f64, ab_t: f64) -> f64 {
    if ab_prev == ab_t || ab_t >= 1.0 {
        return 0.0;
    }
    let v = (1.0 - ab_prev) * (1.0 - ab_t / ab_prev) / (1.0 - ab_t);
    v.max(0.0).sqrt()
}

/// The generalized reverse update expressed on cumulative products:
/// `sqrt(ab_prev) x0 + sqrt(1 - ab_prev - sigma^2) eps_hat + sigma eps_draw`.
pub fn ddim_update(
    ab_t: f64,
    ab_prev: f64,
    x_t: &Tensor,
    x0_pred: &Tensor,
    sigma: f64,
    eps_draw: Option<&Tensor>,
) -> Result<Tensor> {
    if !x_t.same_shape(x0_pred) {
        return Err(invalid("ddim_step: x0 prediction shape differs from x_t"));
    }
    let var_left = 1.0 - ab_prev - sigma * sigma;
    if sigma < 0.0 || var_left < -1e-15 {
        return Err(invalid(format!(
            "sigma^2 = {} exceeds 1 - alpha_bar(t_prev) = {}",
            sigma * sigma,
            1.0 - ab_prev
        )));
    }
    let dir = var_left.max(0.0).sqrt();
    let (s_t, n_t) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
    let s_prev = ab_prev.sqrt();
    let mut out = x_t.zip_map(x0_pred, |x, x0| {
        let eps_hat = if n_t > 0.0 { (x - s_t * x0) / n_t } else { 0.0 };
        s_prev * x0 + dir * eps_hat
    });
    if sigma > 0.0 {
        let noise = eps_draw.ok_or_else(|| invalid("ddim_step: sigma > 0 needs a noise draw"))?;
        if !noise.same_shape(x_t) {
            return Err(invalid("ddim_step: noise shape mismatch"));
        }
        for (o, e) in out.data.iter_mut().zip(&noise.data) {
            *o += sigma * e;
        }
    }
    Ok(out)
}

/// Strictly decreasing steps with a uniform stride that always end at 1.
///
/// The stride is `(T - 1) / (steps - 1)`, so the first step is `T` whenever
/// the stride divides `T - 1` and lies at most `stride - 1` below it
/// otherwise. A single step starts (and ends) at `T`.
pub fn ddim_subsequence(total: usize, steps: usize) -> Result<Vec<usize>> {
    if total == 0 || steps == 0 || steps > total {
        return Err(invalid(format!("cannot take {steps} steps out of {total}")));
    }
    if steps == 1 {
        return Ok(vec![total]);
    }
    let stride = (total - 1) / (steps - 1);
    Ok((0..steps).rev().map(|k| 1 + k * stride).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_schedule() {
        let s = linear_schedule(4, 0.1, 0.4).unwrap();
        let betas = s.betas();
        for (b, e) in betas.iter().zip([0.1, 0.2, 0.3, 0.4]) {
            assert!((b - e).abs() < 1e-15);
        }
        for (a, e) in s.alpha_bars().iter().zip([0.9, 0.72, 0.504, 0.3024]) {
            assert!((a - e).abs() < 1e-15, "{a} vs {e}");
        }
        let single = linear_schedule(1, 0.5, 0.5).unwrap();
        assert_eq!(single.alpha_bars(), &[0.5]);
    }

    #[test]
    fn default_schedule_nearly_destroys_signal() {
        let s = ScheduleSpec::default().build().unwrap();
        assert!(s.alpha_bar(1000) < 5e-5);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn rejects_bad_endpoints() {
        assert!(linear_schedule(10, 0.0, 0.1).is_err());
        assert!(linear_schedule(10, 0.1, 1.0).is_err());
        assert!(linear_schedule(10, 0.3, 0.2).is_err());
        assert!(linear_schedule(0, 0.1, 0.2).is_err());
    }

    fn scalar(v: f64) -> Tensor {
        Tensor::filled(1, 1, v)
    }

    /// Schedule whose step 1 has alpha_bar = 0.25 (beta = 0.75).
    fn quarter() -> NoiseSchedule {
        linear_schedule(1, 0.75, 0.75).unwrap()
    }

    #[test]
    fn q_sample_hand_values() {
        let s = quarter();
        let x = s.q_sample(&scalar(2.0), 1, &scalar(1.0)).unwrap();
        assert!((x.data[0] - 1.866_025_403_784_438_6).abs() < 1e-12);
        let zero = s.q_sample(&scalar(2.0), 1, &scalar(0.0)).unwrap();
        assert_eq!(zero.data[0], 1.0);
        assert!(s.q_sample(&scalar(1.0), 1, &Tensor::zeros(1, 2)).is_err());
        assert!(s.q_sample(&scalar(1.0), 2, &scalar(0.0)).is_err());
    }

    #[test]
    fn x0_eps_inverse_pair() {
        let s = quarter();
        let x0 = s.x0_from_eps(&scalar(1.0), &scalar(0.0), 1).unwrap();
        assert_eq!(x0.data[0], 2.0);
        let xt = s.q_sample(&scalar(0.7), 1, &scalar(-0.3)).unwrap();
        let eps = s.eps_from_x0(&xt, &scalar(0.7), 1).unwrap();
        assert!((eps.data[0] + 0.3).abs() < 1e-12);
        let back = s.x0_from_eps(&xt, &eps, 1).unwrap();
        assert!((back.data[0] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn sigma_hand_values() {
        let s = linear_schedule(4, 0.1, 0.4).unwrap();
        let sigma = s.ddpm_sigma(3).unwrap();
        assert!((sigma - (0.28f64 * 0.3 / 0.496).sqrt()).abs() < 1e-12);
        assert!((sigma - 0.411_527_445_876_550_8).abs() < 1e-12);
        assert_eq!(s.ddpm_sigma(1).unwrap(), 0.0);
        assert_eq!(ddpm_sigma_between(0.5, 0.5), 0.0);
    }

    #[test]
    fn ddim_step_hand_values() {
        let s = linear_schedule(4, 0.1, 0.4).unwrap();
        let out = s
            .ddim_step(&scalar(1.0), &scalar(0.5), 3, 2, 0.0, None)
            .unwrap();
        assert!(
            (out.data[0] - 0.908_906_685_808_439_3).abs() < 1e-12,
            "{}",
            out.data[0]
        );
        let last = s
            .ddim_step(&scalar(1.0), &scalar(0.5), 1, 0, 0.0, None)
            .unwrap();
        assert_eq!(last.data[0], 0.5);
        assert!(s
            .ddim_step(&scalar(1.0), &scalar(0.5), 3, 2, 0.9, Some(&scalar(0.0)))
            .is_err());
        assert!(s
            .ddim_step(&scalar(1.0), &scalar(0.5), 2, 2, 0.0, None)
            .is_err());
    }

    #[test]
    fn subsequences() {
        let seq = ddim_subsequence(1000, 200).unwrap();
        assert_eq!(seq.len(), 200);
        assert_eq!(seq[0], 996);
        assert!(seq.windows(2).all(|w| w[0] - w[1] == 5));
        assert_eq!(*seq.last().unwrap(), 1);
        assert!(seq.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(
            ddim_subsequence(10, 10).unwrap(),
            (1..=10).rev().collect::<Vec<_>>()
        );
        assert_eq!(ddim_subsequence(10, 1).unwrap(), vec![10]);
        let odd = ddim_subsequence(10, 3).unwrap();
        assert_eq!(*odd.last().unwrap(), 1);
        assert!(odd.windows(2).all(|w| w[0] > w[1]));
    }
}
