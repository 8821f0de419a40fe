use super::{AggregationMode, FedError, Result};
use crate::microtensor::ModelParams;

/// Effective coefficient of each update, in input order.
///
/// Literal and normalized weights are built from `n_t·β^F_t` so that at
/// `β = 1` every mode yields exactly the FedAvg coefficients `n_t/n`.
pub fn aggregation_weights(sizes: &[usize], frequencies: &[u64], beta: f64, mode: AggregationMode) -> Result<Vec<f64>> {
    if sizes.is_empty() {
        return Err(FedError::EmptyUpdateSet);
    }
    if sizes.len() != frequencies.len() {
        return Err(FedError::ShapeMismatch(format!("{} sizes, {} frequencies", sizes.len(), frequencies.len())));
    }
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(FedError::BetaOutOfRange(beta));
    }
    let n: f64 = sizes.iter().map(|&s| s as f64).sum();
    if n <= 0.0 {
        return Err(FedError::EmptyUpdateSet);
    }
    let decayed = |i: usize| sizes[i] as f64 * beta.powi(frequencies[i].min(i32::MAX as u64) as i32);
    Ok(match mode {
        AggregationMode::Fedavg => sizes.iter().map(|&s| s as f64 / n).collect(),
        AggregationMode::SelffedLiteral => (0..sizes.len()).map(|i| decayed(i) / n).collect(),
        AggregationMode::SelffedNormalized => {
            let raw: Vec<f64> = (0..sizes.len()).map(decayed).collect();
            let total: f64 = raw.iter().sum();
            raw.iter().map(|r| r / total).collect()
        }
    })
}

/// What the weights of `mode` sum to: 1 except for the literal rule.
pub fn weight_normalizer(sizes: &[usize], frequencies: &[u64], beta: f64, mode: AggregationMode) -> Result<f64> {
    match mode {
        AggregationMode::SelffedLiteral => Ok(aggregation_weights(sizes, frequencies, beta, mode)?.iter().sum()),
        _ => {
            aggregation_weights(sizes, frequencies, beta, mode)?;
            Ok(1.0)
        }
    }
}

/// `Σ_t c_t·ϖ_t`, accumulated in input order.
pub fn apply_weights(params: &[&ModelParams], weights: &[f64]) -> Result<ModelParams> {
    let first = *params.first().ok_or(FedError::EmptyUpdateSet)?;
    if params.len() != weights.len() {
        return Err(FedError::ShapeMismatch(format!("{} updates, {} weights", params.len(), weights.len())));
    }
    if let Some(bad) = params.iter().position(|p| !p.same_layout(first)) {
        return Err(FedError::ShapeMismatch(format!("update {bad} has a different layout")));
    }
    let mut out = first.clone();
    for (name, t) in out.iter_mut() {
        let acc = t.data_mut();
        acc.fill(0.0);
        for (p, &c) in params.iter().zip(weights) {
            let src = p.get(name).expect("same layout").data();
            for (a, s) in acc.iter_mut().zip(src) {
                *a += c * s;
            }
        }
    }
    Ok(out)
}

/// Size-weighted mean of `(ϖ_t, n_t)`.
pub fn aggregate_fedavg(updates: &[(ModelParams, usize)]) -> Result<ModelParams> {
    let sizes: Vec<usize> = updates.iter().map(|u| u.1).collect();
    let w = aggregation_weights(&sizes, &vec![0; sizes.len()], 1.0, AggregationMode::Fedavg)?;
    let refs: Vec<&ModelParams> = updates.iter().map(|u| &u.0).collect();
    apply_weights(&refs, &w)
}

/// Frequency-decayed aggregation of `(ϖ_t, n_t, F_t)`.
pub fn aggregate_selffed(updates: &[(ModelParams, usize, u64)], beta: f64, mode: AggregationMode) -> Result<ModelParams> {
    let sizes: Vec<usize> = updates.iter().map(|u| u.1).collect();
    let freq: Vec<u64> = updates.iter().map(|u| u.2).collect();
    let w = aggregation_weights(&sizes, &freq, beta, mode)?;
    let refs: Vec<&ModelParams> = updates.iter().map(|u| &u.0).collect();
    apply_weights(&refs, &w)
}
