use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Uncertainty measure over a class-probability vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Measure {
    /// `1 − max_c p_c`.
    MaxP,
    /// `−Σ p ln p`.
    Entropy,
}

impl Measure {
    pub const ALL: [Measure; 2] = [Measure::MaxP, Measure::Entropy];

    pub fn name(self) -> &'static str {
        match self {
            Measure::MaxP => "maxp",
            Measure::Entropy => "entropy",
        }
    }
}

/// Where the class probabilities come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreSource {
    /// Softmax of the classifier logits.
    Softmax,
    /// MoGMM class posteriors.
    Posterior,
}

impl ScoreSource {
    pub const ALL: [ScoreSource; 2] = [ScoreSource::Softmax, ScoreSource::Posterior];

    pub fn name(self) -> &'static str {
        match self {
            ScoreSource::Softmax => "softmax",
            ScoreSource::Posterior => "posterior",
        }
    }
}

/// Per-sample uncertainty, higher meaning more uncertain.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreVector {
    pub values: Vec<f64>,
    pub source: ScoreSource,
    pub measure: Measure,
}

const ROW_SUM_TOL: f64 = 1e-6;

/// Scores every row of an `[N×C]` probability matrix.
pub fn uncertainty_scores(probs: &Tensor, measure: Measure, source: ScoreSource) -> Result<ScoreVector> {
    let (n, _) = probs.dims2()?;
    let mut values = Vec::with_capacity(n);
    for r in 0..n {
        let row = probs.row(r);
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > ROW_SUM_TOL || row.iter().any(|&p| p < 0.0) {
            return Err(Error::Contract(format!(
                "row {} is not a probability vector (sum {})",
                r, s
            )));
        }
        values.push(match measure {
            Measure::MaxP => 1.0 - row.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            Measure::Entropy => -row
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| p * p.ln())
                .sum::<f64>(),
        });
    }
    Ok(ScoreVector {
        values,
        source,
        measure,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn score(rows: &[Vec<f64>], m: Measure) -> Vec<f64> {
        let c = rows[0].len();
        let t = Tensor::new(vec![rows.len(), c], rows.concat()).unwrap();
        uncertainty_scores(&t, m, ScoreSource::Softmax).unwrap().values
    }

    #[test]
    fn certain_and_uniform_rows() {
        let rows = vec![vec![1.0, 0.0, 0.0], vec![1.0 / 3.0; 3]];
        let mp = score(&rows, Measure::MaxP);
        let en = score(&rows, Measure::Entropy);
        assert_eq!(mp[0], 0.0);
        assert_eq!(en[0], 0.0);
        assert!((mp[1] - 2.0 / 3.0).abs() < 1e-15);
        assert!((en[1] - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn rejects_unnormalized_rows() {
        let t = Tensor::matrix(1, 2, vec![0.5, 0.6]).unwrap();
        assert!(matches!(
            uncertainty_scores(&t, Measure::Entropy, ScoreSource::Softmax),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn entropy_matches_naive_sum() {
        let rows = vec![vec![0.2, 0.0, 0.8], vec![0.1, 0.3, 0.6], vec![0.25, 0.25, 0.5]];
        let en = score(&rows, Measure::Entropy);
        for (row, e) in rows.iter().zip(en) {
            let naive: f64 = row.iter().map(|&p| if p == 0.0 { 0.0 } else { -p * p.ln() }).sum();
            assert!((e - naive).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn entropy_bounded_and_maximal_at_uniform(raw in prop::collection::vec(0.0f64..1.0, 2..6)) {
            let s: f64 = raw.iter().sum();
            prop_assume!(s > 1e-3);
            let c = raw.len();
            let p: Vec<f64> = raw.iter().map(|v| v / s).collect();
            let e = score(&[p.clone()], Measure::Entropy)[0];
            let u = score(&[vec![1.0 / c as f64; c]], Measure::Entropy)[0];
            prop_assert!(e >= 0.0 && e <= u + 1e-12);
            let mp = score(&[p], Measure::MaxP)[0];
            prop_assert!(mp >= 0.0 && mp <= 1.0 - 1.0 / c as f64 + 1e-12);
        }
    }
}
