use crate::error::{Error, Result};

/// z for a two-sided 95% normal interval.
pub const Z95: f64 = 1.96;

/// Difference of two independent proportions and its 95% half-width.
pub fn proportion_ci(p1: f64, p2: f64, n: u64) -> Result<(f64, f64)> {
    for (name, p) in [("p1", p1), ("p2", p2)] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Input(format!("{name} = {p} outside [0, 1]")));
        }
    }
    if n == 0 {
        return Err(Error::Input("n must be at least 1".into()));
    }
    let n = n as f64;
    let half = Z95 * (p1 * (1.0 - p1) / n + p2 * (1.0 - p2) / n).sqrt();
    Ok((p1 - p2, half))
}
