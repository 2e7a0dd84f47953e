use crate::error::{Error, Result};

/// Timeline of an anticipation query. All values in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnticipationWindow {
    /// Gap between the end of the observation and the action start.
    pub t_a: f64,
    /// Observed duration.
    pub t_o: f64,
    /// Snippet duration.
    pub alpha: f64,
}

impl Default for AnticipationWindow {
    fn default() -> Self {
        Self {
            t_a: 1.0,
            t_o: 5.25,
            alpha: 0.25,
        }
    }
}

const DIVISIBILITY_TOL: f64 = 1e-9;

impl AnticipationWindow {
    pub fn new(t_a: f64, t_o: f64, alpha: f64) -> Result<Self> {
        let w = Self { t_a, t_o, alpha };
        w.validate()?;
        Ok(w)
    }

    /// Window covering `n` snippets of `alpha` seconds.
    pub fn with_snippets(t_a: f64, alpha: f64, n: usize) -> Result<Self> {
        Self::new(t_a, alpha * n as f64, alpha)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_a >= 0.0 && self.t_a.is_finite()) {
            return Err(Error::InvalidArgument(format!("T_a must be >= 0, got {}", self.t_a)));
        }
        if !(self.alpha > 0.0 && self.t_o > 0.0 && self.t_o.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "T_o and alpha must be positive, got {} and {}",
                self.t_o, self.alpha
            )));
        }
        let ratio = self.t_o / self.alpha;
        if (ratio - ratio.round()).abs() > DIVISIBILITY_TOL || ratio.round() < 1.0 {
            return Err(Error::InvalidArgument(format!(
                "T_o = {} is not a positive multiple of alpha = {}",
                self.t_o, self.alpha
            )));
        }
        Ok(())
    }

    /// Number of snippets `N = T_o / alpha`.
    pub fn snippets(&self) -> usize {
        (self.t_o / self.alpha).round() as usize
    }

    /// Seconds before the action at which each snippet ends, oldest first.
    pub fn snippet_locations(&self) -> Vec<f64> {
        let n = self.snippets();
        (1..=n).map(|i| self.t_a + (n - i) as f64 * self.alpha).collect()
    }

    /// `(t_s, t_e)` of the observed segment for an action starting at `tau_s`.
    pub fn observation(&self, tau_s: f64) -> (f64, f64) {
        let t_e = tau_s - self.t_a;
        (t_e - self.t_o, t_e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(got: &[f64], want: &[f64]) {
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-12, "{got:?} vs {want:?}");
        }
    }

    #[test]
    fn default_locations() {
        let w = AnticipationWindow::default();
        assert_eq!(w.snippets(), 21);
        let want: Vec<f64> = (0..21).map(|i| 6.0 - 0.25 * i as f64).collect();
        assert_close(&w.snippet_locations(), &want);
    }

    #[test]
    fn short_windows() {
        let w = AnticipationWindow::new(1.0, 0.75, 0.25).unwrap();
        assert_close(&w.snippet_locations(), &[1.5, 1.25, 1.0]);
        let w = AnticipationWindow::with_snippets(1.0, 0.25, 1).unwrap();
        assert_close(&w.snippet_locations(), &[1.0]);
    }

    #[test]
    fn arithmetic_progression() {
        for n in 1..40 {
            let w = AnticipationWindow::with_snippets(1.0, 0.25, n).unwrap();
            let loc = w.snippet_locations();
            assert!((loc[0] - (1.0 + (n - 1) as f64 * 0.25)).abs() < 1e-12);
            assert!((loc[n - 1] - 1.0).abs() < 1e-12);
            for pair in loc.windows(2) {
                assert!((pair[0] - pair[1] - 0.25).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn observation_span() {
        let (ts, te) = AnticipationWindow::default().observation(10.0);
        assert!((te - 9.0).abs() < 1e-12 && (ts - 3.75).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_windows() {
        assert!(AnticipationWindow::new(1.0, 1.1, 0.25).is_err());
        assert!(AnticipationWindow::new(1.0, 0.0, 0.25).is_err());
        assert!(AnticipationWindow::new(-1.0, 1.0, 0.25).is_err());
    }
}
