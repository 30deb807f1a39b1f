//! Test-set evaluation: classification metrics and lesion identification.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cam::{explain, Upsampling};
use crate::error::{Error, Result};
use crate::metrics::{
    identification_rate, lesion_peak, roc_auc, sens_spec, CaseLocalization, IdentificationReport, OperatingPoint,
    OperatingPolicy, RocPoint, IDENTIFICATION_THRESHOLD,
};
use crate::model::{forward_with, ModelConfig, Params};
use crate::store::{write_json, Lobe};
use crate::train::Sample;
use crate::tensor::Volume;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub policy: OperatingPolicy,
    /// CAM threshold applied before and after upsampling.
    pub tau: f64,
    pub upsampling: Upsampling,
    /// Class whose activation map is scored against the annotations.
    pub cam_class: u8,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            policy: OperatingPolicy::Fixed,
            tau: crate::cam::DEFAULT_TAU,
            upsampling: Upsampling::Trilinear,
            cam_class: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LesionRecord {
    pub lobe: Lobe,
    pub peak_heat: f64,
    pub identified: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case_id: String,
    pub label: u8,
    /// Likelihood of the typical class.
    pub score: f64,
    pub predicted_class: u8,
    pub lesions: Vec<LesionRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc: f64,
    pub accuracy: f64,
    pub operating_point: OperatingPoint,
    pub roc_points: Vec<RocPoint>,
    pub identification: IdentificationReport,
    /// How heat inside a lesion is aggregated before thresholding.
    pub identification_rule: String,
    pub identification_threshold: f64,
    pub options: EvalOptions,
    pub cases: Vec<CaseRecord>,
}

struct CaseOutput {
    record: CaseRecord,
    heatmap: Option<Volume>,
}

fn evaluate_case(params: &Params, config: &ModelConfig, s: &Sample, opts: &EvalOptions) -> Result<CaseOutput> {
    let stack = forward_with(&s.input, params, config, None)?;
    let heatmap = if s.lesions.is_empty() {
        None
    } else {
        let e = explain(params, config, &stack, opts.cam_class, opts.tau, s.ct_dims, opts.upsampling)?;
        Some(e.heatmap.volume_scale)
    };
    let lesions = match &heatmap {
        Some(h) => s
            .lesions
            .iter()
            .map(|l| {
                let peak = lesion_peak(h, l);
                LesionRecord {
                    lobe: l.lobe,
                    peak_heat: peak,
                    identified: peak > IDENTIFICATION_THRESHOLD,
                }
            })
            .collect(),
        None => Vec::new(),
    };
    Ok(CaseOutput {
        record: CaseRecord {
            case_id: s.case_id.clone(),
            label: s.label,
            score: stack.likelihoods[1],
            predicted_class: stack.predicted_class,
            lesions,
        },
        heatmap,
    })
}

/// Classifies every case, explains every annotated case and computes all
/// metrics.
pub fn evaluate(params: &Params, config: &ModelConfig, samples: &[Sample], opts: &EvalOptions) -> Result<EvalReport> {
    params.check_compatible(config)?;
    if samples.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let outputs: Vec<CaseOutput> = samples
        .par_iter()
        .map(|s| evaluate_case(params, config, s, opts))
        .collect::<Result<_>>()?;
    let scores: Vec<f64> = outputs.iter().map(|o| o.record.score).collect();
    let labels: Vec<u8> = outputs.iter().map(|o| o.record.label).collect();
    let (roc_points, auc) = roc_auc(&scores, &labels)?;
    let operating_point = sens_spec(&scores, &labels, opts.policy)?;
    let accuracy =
        outputs.iter().filter(|o| o.record.predicted_class == o.record.label).count() as f64 / outputs.len() as f64;
    let loc: Vec<CaseLocalization> = samples
        .iter()
        .zip(&outputs)
        .map(|(s, o)| CaseLocalization {
            case_id: &s.case_id,
            lesions: &s.lesions,
            heatmap: o.heatmap.as_ref(),
        })
        .collect();
    let identification = identification_rate(&loc, IDENTIFICATION_THRESHOLD)?;
    Ok(EvalReport {
        auc,
        accuracy,
        operating_point,
        roc_points,
        identification,
        identification_rule: "max heat inside the lesion ellipsoid".into(),
        identification_threshold: IDENTIFICATION_THRESHOLD,
        options: *opts,
        cases: outputs.into_iter().map(|o| o.record).collect(),
    })
}

/// Writes `report.json` and `roc.csv` (`fpr,tpr,threshold`) into `dir`.
pub fn write_report(report: &EvalReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(report, &dir.join("report.json"))?;
    let path = dir.join("roc.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::io(&path, e.into()))?;
    w.write_record(["fpr", "tpr", "threshold"])
        .map_err(|e| Error::io(&path, e.into()))?;
    for p in &report.roc_points {
        w.write_record([p.fpr.to_string(), p.tpr.to_string(), p.threshold.to_string()])
            .map_err(|e| Error::io(&path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}
