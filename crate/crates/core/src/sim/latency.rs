//! Pairwise one-way latency model.
//!
//! Two modes: an ingested N-by-N matrix (plain integer milliseconds,
//! row-major, header-free — the format real latency datasets are usually
//! distributed in), or a synthetic log-normal fallback for when no dataset
//! is available. Latencies are symmetric and strictly positive.

use std::path::Path;

/// Per-pair jitter window rule: 10 ms or 10% of the pair's mean latency,
/// whichever is smaller.
pub fn jitter_window(base_ms: u64) -> u64 {
    (base_ms / 10).min(10)
}

#[derive(Clone, Debug)]
pub enum LatencyModel {
    Matrix { n: usize, rows: Vec<u32> },
    Synthetic { median_ms: f64, sigma: f64, salt: u64 },
}

#[derive(Debug, thiserror::Error)]
pub enum LatencyError {
    #[error("latency matrix is not square: {cells} cells")]
    NotSquare { cells: usize },
    #[error("latency matrix row {row}, col {col}: zero latency between distinct peers")]
    ZeroOffDiagonal { row: usize, col: usize },
    #[error("latency matrix parse error at row {row}: {msg}")]
    Parse { row: usize, msg: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl LatencyModel {
    /// Synthetic fallback: log-normal with the given median and sigma.
    pub fn synthetic(median_ms: f64, sigma: f64, salt: u64) -> Self {
        LatencyModel::Synthetic {
            median_ms,
            sigma,
            salt,
        }
    }

    /// Parse a matrix from CSV text: one row per line, comma-separated
    /// integer milliseconds, no header.
    pub fn from_matrix_csv(text: &str) -> Result<Self, LatencyError> {
        let mut rows: Vec<u32> = Vec::new();
        let mut width = None;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let vals: Result<Vec<u32>, _> = line.split(',').map(|tok| tok.trim().parse()).collect();
            let vals = vals.map_err(|e| LatencyError::Parse {
                row: i,
                msg: format!("{e}"),
            })?;
            match width {
                None => width = Some(vals.len()),
                Some(w) if w != vals.len() => {
                    return Err(LatencyError::Parse {
                        row: i,
                        msg: format!("expected {w} columns, got {}", vals.len()),
                    })
                }
                _ => {}
            }
            rows.extend(vals);
        }
        let n = width.unwrap_or(0);
        if n == 0 || rows.len() != n * n {
            return Err(LatencyError::NotSquare { cells: rows.len() });
        }
        for r in 0..n {
            for c in 0..n {
                if r != c && rows[r * n + c] == 0 {
                    return Err(LatencyError::ZeroOffDiagonal { row: r, col: c });
                }
            }
        }
        Ok(LatencyModel::Matrix { n, rows })
    }

    pub fn from_matrix_file(path: &Path) -> Result<Self, LatencyError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_matrix_csv(&text)
    }

    /// Number of distinct endpoints the model can address (matrix mode);
    /// synthetic mode is unbounded.
    pub fn capacity(&self) -> Option<usize> {
        match self {
            LatencyModel::Matrix { n, .. } => Some(*n),
            LatencyModel::Synthetic { .. } => None,
        }
    }

    /// One-way base latency between endpoint slots `u` and `v`, in ms.
    /// Symmetric; strictly positive for u != v.
    pub fn base(&self, u: usize, v: usize) -> u64 {
        if u == v {
            return 0;
        }
        match self {
            LatencyModel::Matrix { n, rows } => {
                debug_assert!(u < *n && v < *n, "endpoint outside matrix");
                rows[u * n + v] as u64
            }
            LatencyModel::Synthetic {
                median_ms,
                sigma,
                salt,
            } => {
                // Deterministic stateless draw per unordered pair.
                let (a, b) = if u < v { (u, v) } else { (v, u) };
                let h1 = mix64(*salt ^ mix64(a as u64) ^ mix64((b as u64) << 1));
                let h2 = mix64(h1 ^ 0x6a09_e667_f3bc_c908);
                let u1 = (h1 >> 11) as f64 / (1u64 << 53) as f64;
                let u2 = (h2 >> 11) as f64 / (1u64 << 53) as f64;
                let z = (-2.0 * (u1.max(f64::EPSILON)).ln()).sqrt()
                    * (std::f64::consts::TAU * u2).cos();
                let ms = (median_ms.ln() + sigma * z).exp();
                (ms.round() as u64).max(1)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_roundtrip_and_zero_check() {
        let m = LatencyModel::from_matrix_csv("0,80,120\n80,0,60\n120,60,0\n").unwrap();
        assert_eq!(m.base(0, 1), 80);
        assert_eq!(m.base(2, 1), 60);
        assert_eq!(m.base(1, 1), 0);

        let bad = LatencyModel::from_matrix_csv("0,0\n5,0\n");
        assert!(matches!(bad, Err(LatencyError::ZeroOffDiagonal { .. })));
    }

    #[test]
    fn synthetic_is_symmetric_positive_and_plausible() {
        let m = LatencyModel::synthetic(80.0, 0.5, 99);
        let mut total = 0u64;
        let k = 2000usize;
        for i in 0..k {
            let a = m.base(i, i + 1);
            assert_eq!(a, m.base(i + 1, i));
            assert!(a >= 1);
            total += a;
        }
        let mean = total as f64 / k as f64;
        // Log-normal(median 80, sigma 0.5) has mean ~= 80 * exp(0.125) ~= 90.7.
        assert!(mean > 70.0 && mean < 115.0, "mean {mean}");
    }

    #[test]
    fn jitter_rule_caps_at_10ms_or_tenth() {
        assert_eq!(jitter_window(40), 4);
        assert_eq!(jitter_window(100), 10);
        assert_eq!(jitter_window(400), 10);
        assert_eq!(jitter_window(5), 0);
    }
}
