//! Held-out evaluation and single-image prediction.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::GrayImage;
use crate::error::{Error, Result};
use crate::metrics::{
    metrics_csv, metrics_from_confusion, pixel_confusion, render_confusion_matrix,
    render_table_row, sample_confusion, ConfusionCounts, Granularity, MetricsReport,
};
use crate::model::OSegNetModel;
use crate::tensor::Tensor;
use crate::train::{batch_tensors, Sample};

pub const PIXEL_REPORT: &str = "pixel_metrics.csv";
pub const DETECTION_REPORT: &str = "detection_metrics.csv";

/// Samples per inference batch; batch norm is in inference mode, so this
/// only bounds memory.
const EVAL_BATCH: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub pixel: ConfusionCounts,
    pub detection: ConfusionCounts,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub pixel: (ConfusionCounts, MetricsReport),
    pub detection: (ConfusionCounts, MetricsReport),
}

impl Evaluation {
    pub fn new() -> Self {
        Evaluation {
            pixel: ConfusionCounts::new(Granularity::Pixel),
            detection: ConfusionCounts::new(Granularity::Sample),
        }
    }

    /// Adds a batch of predictions against binary ground truth.
    pub fn record(&mut self, pred: &Tensor, gt: &Tensor, threshold: f32) -> Result<()> {
        self.pixel += pixel_confusion(pred, gt, threshold)?;
        self.detection += sample_confusion(pred, gt, threshold)?;
        Ok(())
    }

    pub fn report(&self) -> Result<EvalReport> {
        Ok(EvalReport {
            pixel: (self.pixel, metrics_from_confusion(&self.pixel)?),
            detection: (self.detection, metrics_from_confusion(&self.detection)?),
        })
    }
}

impl Default for Evaluation {
    fn default() -> Self {
        Self::new()
    }
}

/// Runs the model over `samples` (ordered by id) and tallies both
/// granularities.
pub fn evaluate(model: &OSegNetModel, samples: &[Sample], threshold: f32) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::invalid("test", "test split is empty"));
    }
    let mut ordered: Vec<&Sample> = samples.iter().collect();
    ordered.sort_by(|a, b| a.id.cmp(&b.id));
    let mut eval = Evaluation::new();
    for chunk in ordered.chunks(EVAL_BATCH) {
        let (images, masks) = batch_tensors(chunk.iter().map(|s| (&s.image, &s.mask)))?;
        let pred = model.predict(&images)?;
        eval.record(&pred, &masks, threshold)?;
    }
    eval.report()
}

impl EvalReport {
    /// Writes the pixel-level and detection CSV reports into `dir`.
    pub fn write_csv(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (file, (c, m)) in [
            (PIXEL_REPORT, &self.pixel),
            (DETECTION_REPORT, &self.detection),
        ] {
            let path = dir.join(file);
            fs::write(&path, metrics_csv(c, m)).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    /// Confusion matrices and percentage rows for both granularities.
    pub fn render(&self, label: &str) -> String {
        let mut s = String::new();
        for (title, (c, m)) in [
            ("Segmentation (pixel level)", &self.pixel),
            ("Detection (sample level)", &self.detection),
        ] {
            let _ = writeln!(s, "{title}");
            let _ = writeln!(s, "{}", render_confusion_matrix(c));
            let _ = writeln!(s, "{}", render_table_row(label, m));
            if !m.undefined.is_empty() {
                let _ = writeln!(s, "undefined (reported as 0): {}", m.undefined.join(", "));
            }
            s.push('\n');
        }
        s
    }
}

/// Probability mask for one image, quantized as `round(p·255)`, or the
/// `{0, 255}` mask at `threshold` when `binary` is set.
pub fn predict_image(
    model: &OSegNetModel,
    image: &GrayImage,
    binary: bool,
    threshold: f32,
) -> Result<GrayImage> {
    let size = model.config.input_size;
    if image.width != size || image.height != size {
        return Err(Error::shape(
            "predict",
            format!(
                "image is {}×{} but the model expects {size}×{size}; resize the input first",
                image.width, image.height
            ),
        ));
    }
    let pred = model.predict(&image.to_tensor())?;
    if binary {
        GrayImage::from_threshold(&pred, threshold)
    } else {
        GrayImage::from_probabilities(&pred)
    }
}
