//! ROC/AUC with DeLong statistics, operating points, dice-based
//! localization scoring, the screening simulation and site-level reports.

mod mask;
mod report;
mod roc;

pub use mask::{dice, localize, BinaryMask, Localization};
pub use report::{pooled_and_per_site, screening_sim, MetricsReport, ScreeningResult, SiteMetrics};
pub use roc::{delong_compare, metrics_at, operating_point, roc_auc, DelongResult, OperatingMetrics, RocAnalysis};

/// Threshold applied to normalized transformer attention maps.
pub const VIT_ATTENTION_THRESHOLD: f64 = 0.1;
/// Threshold applied to normalized GradCAM heatmaps.
pub const GRADCAM_THRESHOLD: f64 = 0.6;
/// Default sensitivity floor for operating points.
pub const MIN_SENSITIVITY: f64 = 0.8;
