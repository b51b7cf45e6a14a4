use serde::{Deserialize, Serialize};

use crate::labels::LabelSet;

/// Where a sample's working label came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelProvenance {
    None,
    Bootstrap,
    Human,
    Auto,
}

impl LabelProvenance {
    /// Bootstrap and human labels both come from an annotator.
    pub fn is_annotator(self) -> bool {
        matches!(self, LabelProvenance::Bootstrap | LabelProvenance::Human)
    }
}

/// Square grayscale image with values in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    side: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(side: usize, pixels: Vec<f32>) -> Option<Self> {
        (pixels.len() == side * side && pixels.iter().all(|v| (0.0..=1.0).contains(v))).then_some(Self { side, pixels })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&v| v as f64).sum::<f64>() / self.pixels.len() as f64
    }
}

/// One image with its hidden ground truth and working label.
///
/// `truth` is private to the datapool module: learner-facing code only sees
/// samples through [`LearnerView`](super::LearnerView).
#[derive(Clone, Debug)]
pub struct Sample {
    id: u64,
    image: Image,
    truth: Option<LabelSet>,
    working_label: Option<LabelSet>,
    provenance: LabelProvenance,
    predicted_loss: Option<f32>,
    source: Option<String>,
}

impl Sample {
    pub fn new(id: u64, image: Image, truth: Option<LabelSet>) -> Self {
        Self {
            id,
            image,
            truth,
            working_label: None,
            provenance: LabelProvenance::None,
            predicted_loss: None,
            source: None,
        }
    }

    pub fn with_source(mut self, source: impl Into<String>) -> Self {
        self.source = Some(source.into());
        self
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn image(&self) -> &Image {
        &self.image
    }

    pub fn working_label(&self) -> Option<LabelSet> {
        self.working_label
    }

    pub fn provenance(&self) -> LabelProvenance {
        self.provenance
    }

    pub fn predicted_loss(&self) -> Option<f32> {
        self.predicted_loss
    }

    pub fn source(&self) -> Option<&str> {
        self.source.as_deref()
    }

    pub fn has_truth(&self) -> bool {
        self.truth.is_some()
    }

    pub(super) fn truth(&self) -> Option<LabelSet> {
        self.truth
    }

    pub(super) fn set_truth(&mut self, truth: Option<LabelSet>) {
        self.truth = truth;
    }

    pub(super) fn set_label(&mut self, label: LabelSet, provenance: LabelProvenance) {
        debug_assert_ne!(provenance, LabelProvenance::None);
        self.working_label = Some(label);
        self.provenance = provenance;
    }

    pub(super) fn clear_label(&mut self) {
        self.working_label = None;
        self.provenance = LabelProvenance::None;
    }

    pub(super) fn set_predicted_loss(&mut self, score: Option<f32>) {
        self.predicted_loss = score;
    }
}
