//! Measurements over trained models: attribution, accuracy, routing
//! statistics, direction interpretation, similarity and ablation grids.

mod attribution;
mod cka;
mod directions;
mod evaluation;
mod factual;
mod routing;
mod stats;

#[cfg(test)]
mod tests;

pub use attribution::{logit_attribution, logit_attribution_with, AttributionReport, ATTRIBUTION_NOTE};
pub use cka::{layer_cka, linear_cka, residual_streams, LayerCka};
pub use directions::{
    byte_token_text, categorize, categorize_directions, direction_geometry, directions_in, effective_rank,
    geometry_of, is_numeral, is_punctuation, normalize_token_text, project_direction, random_mean_angle, top_k,
    vocab_projection, CategorizedDirection, Category, CategoryReport, DirectionTokens, Geometry, ARTICLES,
    CATEGORY_MIN_HITS, CONJUNCTIONS, DISCOURSE, NUMBER_WORDS, PREPOSITIONS, PRONOUNS, TOP_TOKENS,
};
pub use evaluation::{
    argmax, bucket_of, domain_perplexity, fixed_weight_grid, induction_accuracy, induction_accuracy_with,
    induction_head_scores, induction_table, layer_additivity, position_benefit, row_sharpness, sharpness_stats,
    top_heads, Additivity, AdditivitySet, DomainPpl, DomainPplReport, FixedWeightGrid, GridRow, InductionRow,
    InductionTable, PositionBucket, Sharpness, POSITION_BUCKETS,
};
pub use factual::{head_direct_logits, mover_head_knockout, routing_conditions, MoverKnockout, ProbeRow};
pub use routing::{
    classify_vectors, fingerprint_classify, histogram, pca2, population_variance, routing_specialists,
    routing_stats, specialist_flags, stats_from_means, token_sensitivity, welford_variance, Fingerprint, HeadStats,
    LayerStats, RoutingStats, Sensitivity, HISTOGRAM_BINS,
};
pub use stats::{proportion_ci, Z95};
