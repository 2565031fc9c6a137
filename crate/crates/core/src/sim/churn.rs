//! Node lifetime model: i.i.d. exponential lifetimes with mean lambda
//! minutes. `lambda = None` means a static network.

use crate::rng::exp_mean;
use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChurnModel {
    /// Mean lifetime in minutes; `None` disables churn entirely.
    pub mean_lifetime_min: Option<f64>,
    /// Whether a departure is followed by a fresh join, keeping the
    /// population roughly stationary.
    pub rejoin: bool,
}

impl ChurnModel {
    pub fn stationary(mean_lifetime_min: Option<f64>) -> Self {
        ChurnModel {
            mean_lifetime_min,
            rejoin: true,
        }
    }

    pub fn enabled(&self) -> bool {
        self.mean_lifetime_min.is_some()
    }

    /// Draw one lifetime, in virtual ms.
    pub fn lifetime_ms(&self, rng: &mut impl Rng) -> Option<u64> {
        self.mean_lifetime_min
            .map(|lam| (exp_mean(rng, lam * 60_000.0).round() as u64).max(1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn lifetimes_match_mean_within_5_percent() {
        let churn = ChurnModel::stationary(Some(10.0));
        let mut rng = stream(3, "churn");
        let n = 10_000u64;
        let total: u64 = (0..n).map(|_| churn.lifetime_ms(&mut rng).unwrap()).sum();
        let emp_min = total as f64 / n as f64 / 60_000.0;
        assert!(
            (emp_min - 10.0).abs() / 10.0 < 0.05,
            "empirical mean lifetime {emp_min} min"
        );
    }

    #[test]
    fn static_network_never_departs() {
        let churn = ChurnModel::stationary(None);
        let mut rng = stream(3, "churn");
        assert!(!churn.enabled());
        assert_eq!(churn.lifetime_ms(&mut rng), None);
    }
}
