//! Per-utterance uncertainty measures over acoustic-model outputs:
//! predictive entropy, mutual information, predictive variance, and the
//! averaged Kullback-Leibler divergence between consecutively drawn
//! samples. Frame values are aggregated over the utterance by their
//! maximum (mean aggregation available as an ablation).
//!
//! Natural logarithms throughout; probabilities are floored at 1e-12
//! inside logs so one-hot-ish outputs stay finite.

use ndarray::{Array2, Array3, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::acoustic::{forward, sample_predictions, AcousticModel, Mode};
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;

const PROB_FLOOR: f64 = 1e-12;
const NORMALIZATION_TOL: f64 = 1e-6;

/// How per-frame values become one utterance score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Max,
    Mean,
}

fn aggregate(values: &[f64], how: Aggregation) -> f64 {
    match how {
        Aggregation::Max => values.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        Aggregation::Mean => values.iter().sum::<f64>() / values.len() as f64,
    }
}

fn check_normalized(p: ArrayView1<f64>) -> Result<()> {
    let sum: f64 = p.sum();
    if (sum - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::NotNormalized { sum, tol: NORMALIZATION_TOL });
    }
    Ok(())
}

/// Shannon entropy `-sum p ln p` with the `0 ln 0 = 0` convention.
pub fn frame_entropy(p: ArrayView1<f64>) -> Result<f64> {
    check_normalized(p)?;
    let mut h = 0.0;
    for &v in p {
        if v > 0.0 {
            h -= v * v.max(PROB_FLOOR).ln();
        }
    }
    Ok(h)
}

/// Maximum frame entropy of the mean prediction over the utterance.
pub fn utterance_entropy(posteriors: &Array2<f64>) -> Result<f64> {
    if posteriors.nrows() == 0 {
        return Err(Error::Empty { what: "posterior batch".to_string() });
    }
    let per_frame: Result<Vec<f64>> = posteriors.rows().into_iter().map(frame_entropy).collect();
    Ok(aggregate(&per_frame?, Aggregation::Max))
}

/// `H[mean of samples] - mean of H[sample]`; the epistemic share of the
/// predictive entropy, bounded by it.
pub fn frame_mutual_information(samples: ArrayView2<f64>) -> Result<f64> {
    let t = samples.nrows();
    if t < 2 {
        return Err(Error::TooFewSamples { got: t, min: 2 });
    }
    let mean = samples.mean_axis(Axis(0)).unwrap();
    let h_mean = frame_entropy(mean.view())?;
    let mut h_avg = 0.0;
    for row in samples.rows() {
        h_avg += frame_entropy(row)?;
    }
    Ok(h_mean - h_avg / t as f64)
}

/// Total predictive variance: per class `E[p^2] - (E[p])^2`, summed over
/// the classes.
pub fn frame_variance(samples: ArrayView2<f64>) -> Result<f64> {
    let t = samples.nrows();
    if t < 2 {
        return Err(Error::TooFewSamples { got: t, min: 2 });
    }
    let tf = t as f64;
    let mut total = 0.0;
    for c in 0..samples.ncols() {
        let col = samples.column(c);
        let mean: f64 = col.sum() / tf;
        let sq: f64 = col.iter().map(|&v| v * v).sum::<f64>() / tf;
        total += sq - mean * mean;
    }
    Ok(total)
}

/// Averaged KL divergence between consecutively drawn samples, in draw
/// order (no reordering): `(1/(T-1)) sum_t KL(p_t || p_{t+1})`.
pub fn frame_akld(samples: ArrayView2<f64>) -> Result<f64> {
    let t = samples.nrows();
    if t < 2 {
        return Err(Error::TooFewSamples { got: t, min: 2 });
    }
    let mut total = 0.0;
    for i in 0..t - 1 {
        let p = samples.row(i);
        let q = samples.row(i + 1);
        for (&pv, &qv) in p.iter().zip(q.iter()) {
            if pv > 0.0 {
                total += pv * (pv.max(PROB_FLOOR).ln() - qv.max(PROB_FLOOR).ln());
            }
        }
    }
    Ok(total / (t - 1) as f64)
}

/// Utterance-level scores; sampled-model measures are `None` for the fNN.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyScores {
    pub entropy: f64,
    pub mutual_information: Option<f64>,
    pub variance: Option<f64>,
    pub akld: Option<f64>,
    /// Per-frame traces kept for diagnostics (same order as the frames).
    pub entropy_trace: Vec<f64>,
    pub mi_trace: Option<Vec<f64>>,
    pub variance_trace: Option<Vec<f64>>,
    pub akld_trace: Option<Vec<f64>>,
}

impl UncertaintyScores {
    pub fn get(&self, measure: Measure) -> Option<f64> {
        match measure {
            Measure::Entropy => Some(self.entropy),
            Measure::MutualInformation => self.mutual_information,
            Measure::Variance => self.variance,
            Measure::Akld => self.akld,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    Entropy,
    MutualInformation,
    Variance,
    Akld,
}

impl Measure {
    pub const ALL: [Measure; 4] =
        [Measure::Entropy, Measure::MutualInformation, Measure::Variance, Measure::Akld];

    pub fn as_str(&self) -> &'static str {
        match self {
            Measure::Entropy => "entropy",
            Measure::MutualInformation => "mutual_information",
            Measure::Variance => "variance",
            Measure::Akld => "akld",
        }
    }

    pub fn parse(s: &str) -> Result<Measure> {
        match s {
            "entropy" => Ok(Measure::Entropy),
            "mutual_information" | "mi" => Ok(Measure::MutualInformation),
            "variance" => Ok(Measure::Variance),
            "akld" => Ok(Measure::Akld),
            other => Err(Error::InvalidConfig { detail: format!("unknown measure '{other}'") }),
        }
    }
}

/// Compute the measure traces from an explicit sample tensor plus its mean.
/// Exposed so tests can hand-compose the frame ops on the same tensor.
pub fn scores_from_samples(
    mean: &Array2<f64>,
    samples: Option<&Array3<f64>>,
    agg: Aggregation,
) -> Result<UncertaintyScores> {
    let frames = mean.nrows();
    if frames == 0 {
        return Err(Error::Empty { what: "posterior batch".to_string() });
    }
    let entropy_trace: Vec<f64> =
        mean.rows().into_iter().map(frame_entropy).collect::<Result<_>>()?;

    let (mut mi_trace, mut var_trace, mut akld_trace) = (None, None, None);
    if let Some(s) = samples {
        let mut mi = Vec::with_capacity(frames);
        let mut var = Vec::with_capacity(frames);
        let mut akld = Vec::with_capacity(frames);
        for f in 0..frames {
            let frame_samples = s.index_axis(Axis(1), f);
            mi.push(frame_mutual_information(frame_samples)?);
            var.push(frame_variance(frame_samples)?);
            akld.push(frame_akld(frame_samples)?);
        }
        mi_trace = Some(mi);
        var_trace = Some(var);
        akld_trace = Some(akld);
    }

    Ok(UncertaintyScores {
        entropy: aggregate(&entropy_trace, agg),
        mutual_information: mi_trace.as_ref().map(|t| aggregate(t, agg)),
        variance: var_trace.as_ref().map(|t| aggregate(t, agg)),
        akld: akld_trace.as_ref().map(|t| aggregate(t, agg)),
        entropy_trace,
        mi_trace,
        variance_trace: var_trace,
        akld_trace,
    })
}

/// Measure one utterance under a model: the entropy always (from the mean
/// prediction), the sampled measures when the model family provides
/// multiple predictions. Deterministic per seed; the mean used for the
/// entropy is the mean of the same sampled tensor.
pub fn measure_utterance(
    model: &AcousticModel,
    feats: &FeatureMatrix,
    t: usize,
    seed: u64,
    agg: Aggregation,
) -> Result<UncertaintyScores> {
    if model.kind().is_sampled() {
        let samples = sample_predictions(model, feats, t, seed)?;
        let actual_t = samples.shape()[0];
        let mut mean = Array2::zeros((feats.num_frames(), model.num_classes()));
        for k in 0..actual_t {
            mean += &samples.index_axis(Axis(0), k);
        }
        mean /= actual_t as f64;
        scores_from_samples(&mean, Some(&samples), agg)
    } else {
        let mean = forward(model, feats, Mode::Mean { seed })?;
        scores_from_samples(&mean.probs, None, agg)
    }
}
