//! Style classifiers (pipeline and held-out evaluation) and the latent-space
//! bias detector.

mod detector;
mod style;

pub use detector::{
    detector_accuracy, detector_train_config, train_bias_detector, BiasDetector, DetectorReport,
    DEFAULT_DETECTOR_HIDDEN,
};
pub use style::{
    classifier_accuracy, train_style_classifier, ClassifierGrad, ClassifierRole, SoftTokenSequence,
    StyleClassifier, StyleScorer, TrainReport, SOFT_ROW_TOL,
};
pub(crate) use style::{clip, extra_usize};
