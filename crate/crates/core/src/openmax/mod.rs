//! Open-set calibration over abnormal indicator patterns.

mod bank;
mod kmeans;
mod model;
mod pattern;
mod weibull;

pub use bank::{indicator_sources, profiles_of, OpenMaxBank, ProfileModel, BANK_FORMAT};
pub use kmeans::{inertia, minibatch_kmeans, KMeansFit};
pub use model::{
    abnormal_score, apply_abnormal_scores, fit_openmax, nearest_rank_quantile, openmax_probs,
    rank_weights, revised_probabilities, ClassCalibration, OpenMaxConfig, OpenMaxModel,
    OpenMaxScore, DEFAULT_ALPHA, DEFAULT_CENTERS, DEFAULT_QUANTILE, MIN_CLASS_PATTERNS,
};
pub use pattern::{
    extract_abnormal_pattern, min_distance, normalized_distance, pattern_distance,
    indicators_on_record, pattern_from_indicators, AbnormalPattern,
};
pub use weibull::{
    default_tail_size, fit_weibull_mle, weibull_fit_high, weibull_log_likelihood, WeibullTail,
    MIN_DISTINCT, SHIFT_MARGIN,
};
