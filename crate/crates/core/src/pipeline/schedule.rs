use crate::error::{Error, Result};

/// Cumulative signal fractions `ᾱ_t` of the forward noising process.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Cosine schedule with `s = 0.008`, step `t` using `f(t+1)/f(0)`.
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(Error::param("noise schedule needs at least two steps"));
        }
        let s = 0.008;
        let f = |t: f64| {
            let a = ((t / steps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos();
            a * a
        };
        let f0 = f(0.0);
        let alpha_bar = (0..steps)
            .map(|t| (f((t + 1) as f64) / f0).clamp(1e-8, 1.0 - 1e-12))
            .collect();
        Ok(NoiseSchedule { alpha_bar })
    }

    pub fn len(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha_bar.is_empty()
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn values(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `steps` timesteps spread evenly from `T-1` down to `0`.
    pub fn sampling_steps(&self, steps: usize) -> Result<Vec<usize>> {
        let t = self.len();
        if steps == 0 || steps > t {
            return Err(Error::param(format!("sampling steps must be in 1..={t}, got {steps}")));
        }
        if steps == 1 {
            return Ok(vec![t - 1]);
        }
        Ok((0..steps)
            .map(|i| ((steps - 1 - i) as f64 * (t - 1) as f64 / (steps - 1) as f64).round() as usize)
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_invariants() {
        let s = NoiseSchedule::cosine(200).unwrap();
        assert_eq!(s.len(), 200);
        assert!(s.alpha_bar(0) > 0.99);
        assert!(s.alpha_bar(199) < 0.01 && s.alpha_bar(199) > 0.0);
        for w in s.values().windows(2) {
            assert!(w[1] < w[0]);
        }
    }

    #[test]
    fn sampling_steps_cover_the_range() {
        let s = NoiseSchedule::cosine(200).unwrap();
        let ts = s.sampling_steps(20).unwrap();
        assert_eq!(ts.len(), 20);
        assert_eq!((ts[0], ts[19]), (199, 0));
        assert!(ts.windows(2).all(|w| w[1] < w[0]));
        assert!(s.sampling_steps(0).is_err());
        assert!(s.sampling_steps(201).is_err());
    }
}
