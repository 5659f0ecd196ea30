//! Plain-text point export: one point per line, `x y z label t`.
//! Lines starting with `#` are comments.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::grid::{LabeledPoint, LabeledPointCloud};
use crate::scalar::Scalar;

pub fn format_xyz<T: Scalar>(cloud: &LabeledPointCloud<T>) -> String {
    let mut s = String::with_capacity(cloud.len() * 40);
    for p in &cloud.points {
        let _ = writeln!(
            s,
            "{:?} {:?} {:?} {} {}",
            p.position[0].f64(),
            p.position[1].f64(),
            p.position[2].f64(),
            p.label,
            p.timestamp
        );
    }
    s
}

pub fn parse_xyz<T: Scalar>(text: &str) -> Result<LabeledPointCloud<T>> {
    let mut points = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 5 {
            return Err(Error::Parse(format!("line {}: expected 5 columns", n + 1)));
        }
        let f = |s: &str| -> Result<T> {
            s.parse::<f64>()
                .map(T::of)
                .map_err(|e| Error::Parse(format!("line {}: {e}", n + 1)))
        };
        let u = |s: &str| -> Result<usize> {
            s.parse::<usize>()
                .map_err(|e| Error::Parse(format!("line {}: {e}", n + 1)))
        };
        points.push(LabeledPoint {
            position: [f(cols[0])?, f(cols[1])?, f(cols[2])?],
            label: u(cols[3])?,
            timestamp: u(cols[4])?,
        });
    }
    Ok(LabeledPointCloud { points })
}

pub fn write_xyz<T: Scalar>(path: &Path, cloud: &LabeledPointCloud<T>) -> Result<()> {
    std::fs::write(path, format_xyz(cloud)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let cloud = LabeledPointCloud {
            points: vec![LabeledPoint {
                position: [0.1f64, -3.25, 1e-17],
                label: 4,
                timestamp: 2,
            }],
        };
        let text = format_xyz(&cloud);
        assert_eq!(text.split_whitespace().count(), 5);
        assert_eq!(parse_xyz::<f64>(&text).unwrap(), cloud);
    }
}
