//! Running a trained model over a dataset and scoring it.

use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::Result;
use crate::eval::{evaluate_ap, standard_thresholds, EvalDetection, EvalGroundTruth, EvalReport, Protocol};
use crate::model::Model;
use crate::numerics::Tensor;

pub fn detections_for_image(
    model: &Model,
    id: &str,
    image: &Tensor,
    max_detections: usize,
) -> Result<Vec<EvalDetection>> {
    Ok(model
        .infer(image, max_detections)?
        .into_iter()
        .map(|d| EvalDetection {
            image: id.to_string(),
            class: d.class,
            score: d.score,
            bbox: d.bbox,
        })
        .collect())
}

/// Detections for every item in dataset order. `parallel` spreads images
/// over threads; the output is identical either way.
pub fn predict_dataset(
    model: &Model,
    ds: &Dataset,
    max_detections: usize,
    parallel: bool,
) -> Result<Vec<EvalDetection>> {
    let run = |item: &crate::data::AnnotatedImage| -> Result<Vec<EvalDetection>> {
        let img = item.load_image()?;
        detections_for_image(model, &item.id, &img.to_tensor(), max_detections)
    };
    let per_image: Vec<Result<Vec<EvalDetection>>> = if parallel {
        ds.items.par_iter().map(run).collect()
    } else {
        ds.items.iter().map(run).collect()
    };
    Ok(per_image
        .into_iter()
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect())
}

pub fn ground_truth(ds: &Dataset) -> Vec<EvalGroundTruth> {
    ds.items
        .iter()
        .flat_map(|item| {
            item.instances.iter().map(|i| EvalGroundTruth {
                image: item.id.clone(),
                class: i.class,
                bbox: i.bbox,
                difficult: i.difficult,
            })
        })
        .collect()
}

/// AP50, AP75 and AP50:95 of `detections` against the dataset.
pub fn evaluate_detections(detections: &[EvalDetection], ds: &Dataset, protocol: Protocol) -> Result<EvalReport> {
    evaluate_ap(
        detections,
        &ground_truth(ds),
        &ds.labels,
        &standard_thresholds(),
        protocol,
    )
}
