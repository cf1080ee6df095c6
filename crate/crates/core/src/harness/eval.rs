use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::somp_detect;
use crate::error::{Error, Result};
use crate::multicoset::{CMatrix, MeasurementMatrix};
use crate::signal_model::OccupancyVector;
use crate::tensornet::{forward, LabeledDataset, Mode, ModelWeights, Scalar};

/// `o_l = 1` when `p_l >= lambda`.
pub fn predict_occupancy<F: Scalar>(probs: &[F], lambda: f64) -> OccupancyVector {
    OccupancyVector::from_bits(probs.iter().map(|p| p.to_f64_lossy() >= lambda).collect())
}

/// Mean over samples of the fraction of correctly classified sub-bands.
pub fn prediction_accuracy(preds: &[OccupancyVector], labels: &[OccupancyVector]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::invalid("no predictions to score"));
    }
    let mut total = 0.0;
    for (p, o) in preds.iter().zip(labels) {
        if p.len() != o.len() || o.is_empty() {
            return Err(Error::invalid(format!(
                "prediction length {} vs label length {}",
                p.len(),
                o.len()
            )));
        }
        total += p.matches(o) as f64 / o.len() as f64;
    }
    Ok(total / preds.len() as f64)
}

pub fn model_predictions<F: Scalar>(
    w: &ModelWeights<F>,
    data: &LabeledDataset,
    lambda: f64,
) -> Result<Vec<OccupancyVector>> {
    data.iter()
        .map(|s| forward(w, &s.feature, Mode::Eval).map(|(p, _)| predict_occupancy(&p, lambda)))
        .collect()
}

pub fn model_accuracy<F: Scalar>(
    w: &ModelWeights<F>,
    data: &LabeledDataset,
    lambda: f64,
) -> Result<f64> {
    let labels: Vec<OccupancyVector> = data.labels().cloned().collect();
    prediction_accuracy(&model_predictions(w, data, lambda)?, &labels)
}

/// Sparsity-aware SOMP accuracy: each sample is decoded with its true `K`.
pub fn somp_accuracy(a: &MeasurementMatrix, spectra: &[(CMatrix, OccupancyVector)]) -> Result<f64> {
    let mut preds = Vec::with_capacity(spectra.len());
    let mut labels = Vec::with_capacity(spectra.len());
    for (y, label) in spectra {
        let r = somp_detect(y, a, label.popcount())?;
        preds.push(r.occupancy(label.len())?);
        labels.push(label.clone());
    }
    prediction_accuracy(&preds, &labels)
}

/// Accuracy of predicting every sub-band vacant: `(L - K) / L` for fixed `K`.
pub fn all_zero_accuracy(labels: &[OccupancyVector]) -> Result<f64> {
    let zeros: Vec<OccupancyVector> = labels
        .iter()
        .map(|l| OccupancyVector::empty(l.len()))
        .collect();
    prediction_accuracy(&zeros, labels)
}

/// One CSV line: accuracy of `scheme` on `domain` at `snr_db`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub domain: String,
    pub scheme: String,
    pub snr_db: f64,
    pub p_acc: f64,
    pub n_test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeStanding {
    pub p_acc: f64,
    /// 1 for the best scheme; ties share the better rank.
    pub rank: usize,
    /// Accuracy relative to the best scheme on the same domain.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultSummary {
    pub snr_db: f64,
    pub domains: BTreeMap<String, BTreeMap<String, SchemeStanding>>,
}

/// Ranks schemes per domain at `snr_db` (rows at other SNRs are ignored).
pub fn summarize(rows: &[SweepRow], snr_db: f64) -> ResultSummary {
    let mut by_domain: BTreeMap<String, Vec<&SweepRow>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.snr_db == snr_db) {
        by_domain.entry(r.domain.clone()).or_default().push(r);
    }
    let domains = by_domain
        .into_iter()
        .map(|(d, rs)| {
            let best = rs.iter().map(|r| r.p_acc).fold(f64::NEG_INFINITY, f64::max);
            let standings = rs
                .iter()
                .map(|r| {
                    let rank = 1 + rs.iter().filter(|o| o.p_acc > r.p_acc).count();
                    let ratio = if best > 0.0 { r.p_acc / best } else { 1.0 };
                    (
                        r.scheme.clone(),
                        SchemeStanding {
                            p_acc: r.p_acc,
                            rank,
                            ratio,
                        },
                    )
                })
                .collect();
            (d, standings)
        })
        .collect();
    ResultSummary { snr_db, domains }
}

/// Writes `rows` as CSV with header `domain,scheme,snr_db,p_acc,n_test`.
pub fn emit_results(rows: &[SweepRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    w.write_record(["domain", "scheme", "snr_db", "p_acc", "n_test"])?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn emit_summary(summary: &ResultSummary, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(summary)?)?;
    Ok(())
}

pub fn read_results(path: impl AsRef<Path>) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ov(bits: &[u8]) -> OccupancyVector {
        OccupancyVector::from_bits(bits.iter().map(|&b| b == 1).collect())
    }

    #[test]
    fn threshold_is_inclusive() {
        assert_eq!(predict_occupancy(&[0.7f64, 0.3], 0.5), ov(&[1, 0]));
        assert_eq!(predict_occupancy(&[0.5f32], 0.5), ov(&[1]));
    }

    #[test]
    fn accuracy_examples() {
        let label = OccupancyVector::from_indices(40, [0, 5]).unwrap();
        let mut wrong = label.bits().to_vec();
        wrong[1] = true;
        wrong[2] = true;
        let acc = prediction_accuracy(
            &[OccupancyVector::from_bits(wrong)],
            std::slice::from_ref(&label),
        )
        .unwrap();
        assert!((acc - 0.95).abs() < 1e-15);
        assert_eq!(
            prediction_accuracy(std::slice::from_ref(&label), std::slice::from_ref(&label))
                .unwrap(),
            1.0
        );
        assert!(prediction_accuracy(&[], &[label]).is_err());
        let k8 = OccupancyVector::from_indices(40, 0..8).unwrap();
        assert_eq!(all_zero_accuracy(&[k8]).unwrap(), 0.8);
    }

    #[test]
    fn ranking_and_ratio() {
        let row = |scheme: &str, p: f64| SweepRow {
            domain: "T1".into(),
            scheme: scheme.into(),
            snr_db: 10.0,
            p_acc: p,
            n_test: 10,
        };
        let rows = [row("a", 0.9), row("b", 0.95), row("c", 0.9)];
        let s = summarize(&rows, 10.0);
        let t1 = &s.domains["T1"];
        assert_eq!(t1["b"].rank, 1);
        assert_eq!(t1["b"].ratio, 1.0);
        assert_eq!(t1["a"].rank, 2);
        assert_eq!(t1["c"].rank, 2);
        assert!((t1["a"].ratio - 0.9 / 0.95).abs() < 1e-15);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        emit_results(&[], &path).unwrap();
        assert_eq!(
            fs::read_to_string(&path).unwrap(),
            "domain,scheme,snr_db,p_acc,n_test\n"
        );
        let rows = vec![SweepRow {
            domain: "T2".into(),
            scheme: "RT WSSNet".into(),
            snr_db: -5.0,
            p_acc: 0.875,
            n_test: 500,
        }];
        emit_results(&rows, &path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap().lines().count(), 2);
        assert_eq!(read_results(&path).unwrap(), rows);
    }
}
