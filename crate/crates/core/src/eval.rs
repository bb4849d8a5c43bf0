//! Test-set evaluation against RSS ground truth.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{derive_seed, load_sample, SampleRecord};
use crate::error::{Error, Result};
use crate::losses::{nmse, psnr, ssim};
use crate::models::{infer, Checkpoint, InferenceMode, ModelInput};
use crate::mri::{self, MultiCoilKSpace};
use crate::sampling::{acs_fraction_for, make_mask, MaskScheme, Phase, SamplingMask};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub sample_id: String,
    #[serde(rename = "R")]
    pub r: u32,
    pub setup: String,
    pub ssim: f64,
    pub psnr: f64,
    pub nmse: f64,
}

/// Where and how test samples are subsampled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub scheme: MaskScheme,
    pub seed: u64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            scheme: MaskScheme::Equispaced,
            seed: 0,
        }
    }
}

impl EvalProtocol {
    /// The fixed inference mask of sample `id` at acceleration `r`.
    pub fn mask(&self, id: &str, nx: usize, ny: usize, r: u32) -> Result<SamplingMask> {
        let acs = acs_fraction_for(r, Phase::Inference)?;
        make_mask(
            self.scheme,
            nx,
            ny,
            r as f64,
            acs,
            derive_seed(self.seed, &format!("{id}/R{r}")),
        )
    }
}

/// RSS of the zero-filled coil images.
pub fn zero_filled(input: &ModelInput) -> Result<Tensor> {
    Ok(mri::rss_reconstruct(&MultiCoilKSpace::new(
        input.kspace.clone(),
    )?))
}

/// Reconstructs every record at every acceleration with `recon` and scores
/// the magnitudes. Output is ordered by record, then acceleration.
pub fn evaluate_with<F>(
    root: &Path,
    records: &[SampleRecord],
    accelerations: &[u32],
    protocol: &EvalProtocol,
    setup: &str,
    recon: F,
) -> Result<Vec<(EvalRecord, Tensor)>>
where
    F: Fn(&ModelInput) -> Result<Tensor> + Sync,
{
    if accelerations.is_empty() {
        return Err(Error::invalid("no accelerations to evaluate"));
    }
    for &r in accelerations {
        acs_fraction_for(r, Phase::Inference)?;
    }
    let per_sample: Vec<Vec<(EvalRecord, Tensor)>> = records
        .par_iter()
        .map(|rec| {
            let sample = load_sample(root, rec)?;
            let (nx, ny) = sample.kspace.dims();
            if sample.gt.shape() != [nx, ny] {
                return Err(Error::format(
                    root.join(&rec.gt),
                    format!(
                        "ground truth shape {:?}, expected [{nx}, {ny}]",
                        sample.gt.shape()
                    ),
                ));
            }
            accelerations
                .iter()
                .map(|&r| {
                    let mask = protocol.mask(&rec.id, nx, ny, r)?;
                    let input = ModelInput::from_acquisition(&sample.kspace, &mask)?;
                    let pred = recon(&input)?;
                    let record = score(&rec.id, r, setup, &sample.gt, &pred)?;
                    Ok((record, pred))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(per_sample.into_iter().flatten().collect())
}

/// SSIM, PSNR and NMSE of `pred` against `gt`.
pub fn score(id: &str, r: u32, setup: &str, gt: &Tensor, pred: &Tensor) -> Result<EvalRecord> {
    let record = EvalRecord {
        sample_id: id.to_string(),
        r,
        setup: setup.to_string(),
        ssim: ssim(pred, gt)?,
        psnr: psnr(gt, pred)?,
        nmse: nmse(gt, pred)?,
    };
    if !(record.ssim.is_finite() && record.nmse.is_finite()) || record.psnr.is_nan() {
        return Err(Error::NonFinite(format!("metrics of {id} at R={r}")));
    }
    Ok(record)
}

/// Evaluates a checkpoint through its setup's inference path.
pub fn evaluate(
    checkpoint: &Checkpoint,
    mode: InferenceMode,
    root: &Path,
    records: &[SampleRecord],
    accelerations: &[u32],
    protocol: &EvalProtocol,
    setup: &str,
) -> Result<Vec<(EvalRecord, Tensor)>> {
    evaluate_with(root, records, accelerations, protocol, setup, |input| {
        infer(mode, &checkpoint.model, &checkpoint.params, input)
    })
}

pub fn mean_ssim(records: &[EvalRecord]) -> f64 {
    records.iter().map(|r| r.ssim).sum::<f64>() / records.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_dataset, DatasetConfig, Family, Split, SplitCount};

    fn dataset(dir: &Path) -> Vec<SampleRecord> {
        let cfg = DatasetConfig {
            nx: 32,
            ny: 32,
            coils: 2,
            noise_sigma: 0.0,
            counts: vec![SplitCount {
                family: Family::Target,
                split: Split::Test,
                count: 4,
            }],
            seed: 3,
        };
        build_dataset(&cfg, dir).unwrap().records
    }

    #[test]
    fn oracle_and_zero_filled() {
        let dir = tempfile::tempdir().unwrap();
        let records = dataset(dir.path());
        let protocol = EvalProtocol::default();
        let gts: Vec<Tensor> = records
            .iter()
            .map(|r| load_sample(dir.path(), r).unwrap().gt)
            .collect();
        let results =
            evaluate_with(dir.path(), &records, &[2, 4], &protocol, "zf", zero_filled).unwrap();
        assert_eq!(results.len(), records.len() * 2);
        for pair in results.chunks(2) {
            assert_eq!(pair[0].0.r, 2);
            assert!(pair[0].0.ssim > pair[1].0.ssim, "{:?}", pair);
            assert!(pair[0].0.nmse < pair[1].0.nmse);
        }
        for (rec, gt) in records.iter().zip(&gts) {
            let s = score(&rec.id, 4, "oracle", gt, gt).unwrap();
            assert!((s.ssim - 1.0).abs() < 1e-12);
            assert_eq!(s.nmse, 0.0);
        }
        let again =
            evaluate_with(dir.path(), &records, &[2, 4], &protocol, "zf", zero_filled).unwrap();
        assert_eq!(results, again);
        assert!(evaluate_with(dir.path(), &records, &[3], &protocol, "zf", zero_filled).is_err());
        std::fs::remove_file(dir.path().join(&records[1].gt)).unwrap();
        assert!(evaluate_with(dir.path(), &records, &[4], &protocol, "zf", zero_filled).is_err());
    }
}
