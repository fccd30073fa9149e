use crate::drift_field::{sq_dist, SampleBatch};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct Coverage {
    /// Per mode centre: fraction of samples within the radius.
    pub fractions: Vec<f64>,
    pub samples: usize,
    pub empty: bool,
}

impl Coverage {
    pub fn min_fraction(&self) -> f64 {
        self.fractions.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Draws `n` actions for `state` through `sample` and counts how many land
/// within `radius` of each mode centre.
pub fn mode_coverage<F>(
    mut sample: F,
    state: &[f64],
    n: usize,
    centers: &[Vec<f64>],
    radius: f64,
) -> Result<Coverage>
where
    F: FnMut(&[f64], usize) -> Result<SampleBatch>,
{
    if n == 0 {
        return Ok(Coverage {
            fractions: vec![0.0; centers.len()],
            samples: 0,
            empty: true,
        });
    }
    let batch = sample(state, n)?;
    let r2 = radius * radius;
    let fractions = centers
        .iter()
        .map(|c| batch.points().filter(|a| sq_dist(a, c) <= r2).count() as f64 / batch.len() as f64)
        .collect();
    Ok(Coverage {
        fractions,
        samples: batch.len(),
        empty: false,
    })
}
