use super::PipelineError;

/// Per-target affine scaling fitted on training targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    /// Population standard deviation.
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(c: usize) -> Self {
        Self { mean: vec![0.0; c], std: vec![1.0; c] }
    }

    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>, c: usize) -> Result<Self, PipelineError> {
        let rows: Vec<&[f64]> = rows.into_iter().collect();
        if rows.is_empty() {
            return Err(PipelineError::EmptySplit("train"));
        }
        let n = rows.len() as f64;
        let mut mean = vec![0.0; c];
        for r in &rows {
            for (m, v) in mean.iter_mut().zip(r.iter()) {
                *m += v / n;
            }
        }
        let mut std = vec![0.0; c];
        for r in &rows {
            for ((s, v), m) in std.iter_mut().zip(r.iter()).zip(&mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        for (j, s) in std.iter_mut().enumerate() {
            *s = s.sqrt();
            if *s == 0.0 || !s.is_finite() {
                return Err(PipelineError::DegenerateTarget { index: j });
            }
        }
        Ok(Self { mean, std })
    }

    pub fn standardize(&self, y: &[f64]) -> Vec<f64> {
        y.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn destandardize(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| v * s + m).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn one_two_three() {
        let rows = [[1.0], [2.0], [3.0]];
        let s = Standardizer::fit(rows.iter().map(|r| r.as_slice()), 1).unwrap();
        assert_eq!(s.mean, vec![2.0]);
        assert!((s.std[0] - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        let z: Vec<f64> = rows.iter().map(|r| s.standardize(r)[0]).collect();
        assert!((z[0] + 1.224744871391589).abs() < 1e-12 && z[1] == 0.0 && (z[2] - 1.224744871391589).abs() < 1e-12);

        let refit = Standardizer::fit(z.iter().map(std::slice::from_ref), 1).unwrap();
        assert!(refit.mean[0].abs() < 1e-12 && (refit.std[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_column_rejected() {
        let rows = [[1.0, 5.0], [2.0, 5.0]];
        assert!(matches!(
            Standardizer::fit(rows.iter().map(|r| r.as_slice()), 2),
            Err(PipelineError::DegenerateTarget { index: 1 })
        ));
    }

    proptest! {
        #[test]
        fn round_trip(rows in proptest::collection::vec(proptest::collection::vec(-1e3f64..1e3, 2), 2..20),
                      probe in proptest::collection::vec(-1e4f64..1e4, 2)) {
            if let Ok(s) = Standardizer::fit(rows.iter().map(|r| r.as_slice()), 2) {
                let back = s.destandardize(&s.standardize(&probe));
                for (a, b) in back.iter().zip(&probe) {
                    prop_assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0));
                }
            }
        }
    }
}
