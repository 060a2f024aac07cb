//! Polynomial variance-preserving noise schedule.
//!
//! `alpha[t]` follows `(1 - 2s) * (1 - (t/T)^2) + s` for a small precision
//! `s`. Per-step ratios `alpha[t] / alpha[t-1]` are clipped so that their
//! square never falls below [`MIN_STEP_RATIO_SQ`], and the table is rebuilt
//! as the cumulative product of the clipped ratios. Everything downstream
//! (training targets, posterior coefficients, SNR weights) reads from the
//! precomputed tables.

use std::io::Write;

use crate::error::{Error, Result};

/// Lower bound on `(alpha[t] / alpha[t-1])^2` after clipping.
pub const MIN_STEP_RATIO_SQ: f64 = 0.001;

#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    steps: usize,
    precision: f64,
    raw_alpha: Vec<f64>,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
    sigma_sq: Vec<f64>,
    gamma: Vec<f64>,
    snr: Vec<f64>,
}

/// Coefficients of the forward transition `q(z_t | z_s)` and of the
/// posterior `q(z_s | x, z_t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionCoeffs {
    pub alpha_ts: f64,
    pub sigma_ts_sq: f64,
    /// Posterior-mean weight on `z_t`.
    pub mu_z_coeff: f64,
    /// Posterior-mean weight on `x`.
    pub mu_x_coeff: f64,
    /// Posterior standard deviation `sigma_{t -> s}`.
    pub sigma_t_to_s: f64,
    /// `1 / alpha_{t|s}`, the weight on `z_t` in the noise-prediction update.
    pub z_coeff: f64,
    /// `sigma_{t|s}^2 / (alpha_{t|s} sigma_t)`, the weight on predicted noise.
    pub eps_coeff: f64,
}

impl TransitionCoeffs {
    pub const IDENTITY: TransitionCoeffs = TransitionCoeffs {
        alpha_ts: 1.0,
        sigma_ts_sq: 0.0,
        mu_z_coeff: 1.0,
        mu_x_coeff: 0.0,
        sigma_t_to_s: 0.0,
        z_coeff: 1.0,
        eps_coeff: 0.0,
    };

    /// Coefficients from raw levels `(alpha_t, sigma_t)` and `(alpha_s, sigma_s)`
    /// with `s` the less noisy level.
    pub fn from_levels(alpha_t: f64, sigma_t: f64, alpha_s: f64, sigma_s: f64) -> Self {
        let alpha_ts = alpha_t / alpha_s;
        let sigma_t_sq = sigma_t * sigma_t;
        let sigma_s_sq = sigma_s * sigma_s;
        let sigma_ts_sq = (sigma_t_sq - alpha_ts * alpha_ts * sigma_s_sq).max(0.0);
        let sigma_ts = sigma_ts_sq.sqrt();
        TransitionCoeffs {
            alpha_ts,
            sigma_ts_sq,
            mu_z_coeff: alpha_ts * sigma_s_sq / sigma_t_sq,
            mu_x_coeff: alpha_s * sigma_ts_sq / sigma_t_sq,
            sigma_t_to_s: sigma_ts * sigma_s / sigma_t,
            z_coeff: 1.0 / alpha_ts,
            eps_coeff: sigma_ts_sq / (alpha_ts * sigma_t),
        }
    }

    /// Posterior mean `mu_{t -> s}(x, z_t)` for scalar channels.
    pub fn posterior_mean(&self, x: f64, z_t: f64) -> f64 {
        self.mu_z_coeff * z_t + self.mu_x_coeff * x
    }
}

impl NoiseSchedule {
    pub fn polynomial(steps: usize, precision: f64) -> Result<Self> {
        if steps < 1 {
            return Err(Error::param("schedule needs at least one step"));
        }
        if !(precision > 0.0 && precision < 0.5) {
            return Err(Error::param(format!(
                "precision must lie in (0, 0.5), got {precision}"
            )));
        }
        let horizon = steps as f64;
        let raw_alpha: Vec<f64> = (0..=steps)
            .map(|t| {
                let frac = t as f64 / horizon;
                (1.0 - 2.0 * precision) * (1.0 - frac * frac) + precision
            })
            .collect();

        let mut alpha = Vec::with_capacity(steps + 1);
        let mut prev_raw = 1.0;
        let mut acc = 1.0;
        for &a in &raw_alpha {
            let ratio_sq = ((a / prev_raw).powi(2)).max(MIN_STEP_RATIO_SQ);
            acc *= ratio_sq.sqrt();
            alpha.push(acc);
            prev_raw = a;
        }

        // (1 - a)(1 + a) keeps sigma^2 accurate when alpha is close to one.
        let sigma_sq: Vec<f64> = alpha.iter().map(|&a| (1.0 - a) * (1.0 + a)).collect();
        let sigma = sigma_sq.iter().map(|s| s.sqrt()).collect();
        let gamma = alpha
            .iter()
            .zip(&sigma_sq)
            .map(|(&a, &s2)| -((a * a).ln() - s2.ln()))
            .collect::<Vec<_>>();
        let snr = alpha
            .iter()
            .zip(&sigma_sq)
            .map(|(&a, &s2)| a * a / s2)
            .collect();

        Ok(NoiseSchedule {
            steps,
            precision,
            raw_alpha,
            alpha,
            sigma,
            sigma_sq,
            gamma,
            snr,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn precision(&self) -> f64 {
        self.precision
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }

    pub fn gammas(&self) -> &[f64] {
        &self.gamma
    }

    pub fn snrs(&self) -> &[f64] {
        &self.snr
    }

    /// Alpha values before step-ratio clipping.
    pub fn raw_alphas(&self) -> &[f64] {
        &self.raw_alpha
    }

    fn check_level(&self, t: usize) -> Result<()> {
        if t > self.steps {
            return Err(Error::param(format!(
                "timestep {t} outside [0, {}]",
                self.steps
            )));
        }
        Ok(())
    }

    /// Transition and posterior coefficients from level `t` down to `s`.
    ///
    /// `t == s` yields [`TransitionCoeffs::IDENTITY`] exactly.
    pub fn transition(&self, t: usize, s: usize) -> Result<TransitionCoeffs> {
        self.check_level(t)?;
        if s > t {
            return Err(Error::param(format!(
                "target level {s} is noisier than source level {t}"
            )));
        }
        Ok(self.transition_unchecked(t, s))
    }

    pub(crate) fn transition_unchecked(&self, t: usize, s: usize) -> TransitionCoeffs {
        if t == s {
            return TransitionCoeffs::IDENTITY;
        }
        TransitionCoeffs::from_levels(self.alpha[t], self.sigma[t], self.alpha[s], self.sigma[s])
    }

    /// `(SNR(t), gamma(t))`.
    pub fn snr_and_gamma(&self, t: usize) -> Result<(f64, f64)> {
        self.check_level(t)?;
        Ok((self.snr[t], self.gamma[t]))
    }

    /// Per-step weight `1 - SNR(t-1)/SNR(t)` of the weighted objective.
    /// Only exposed for diagnostics; training uses the unweighted loss.
    pub fn step_weight(&self, t: usize) -> Result<f64> {
        self.check_level(t)?;
        if t == 0 {
            return Err(Error::param("step weight undefined at t = 0"));
        }
        Ok(1.0 - self.snr[t - 1] / self.snr[t])
    }

    pub fn sigma_sq(&self, t: usize) -> f64 {
        self.sigma_sq[t]
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "t,alpha,sigma,gamma")?;
        for t in 0..=self.steps {
            writeln!(
                out,
                "{t},{},{},{}",
                self.alpha[t], self.sigma[t], self.gamma[t]
            )?;
        }
        Ok(())
    }
}
