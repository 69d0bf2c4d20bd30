//! Shift-aware temperature network.
//!
//! Each batch is summarized per column by its deviation from the source
//! column means (the shift trend). Columns are nodes of a complete graph;
//! message passing on that graph, mean pooling and a small head that also
//! sees each sample's logits and trend values produce one temperature per
//! sample. The network is post-trained on source batches with focal and
//! calibration losses while the classifier stays frozen.

mod loss;
mod model;
mod train;
mod trend;

pub use loss::{calibration_loss, focal_loss, tempered_loss_and_grad, LossWeights};
pub use model::{Calibrator, CalibratorSpec, ConstantTemperature, TemperatureModel, TEMPERATURE_FLOOR};
pub use train::{post_train_calibrator, CalibrationHistory};
pub use trend::{compute_shift_trend, ShiftTrend, TrendGroup};
