//! Evaluation of frozen embeddings: slide-level MIL, morphology clustering,
//! cross-modal alignment metrics and 2-D projections.

mod abmil;
mod alignment;
mod evaluate;
mod gmm;
mod probe;
mod projection;
mod prototypes;
mod records;

pub use abmil::{abmil_predict, abmil_train, AbmilConfig, AbmilParams, Bag};
pub use alignment::{
    alignment_metrics, cross_modal_recall, domain_probe_accuracy, silhouette_by_modality, AlignmentMetrics,
    PROBE_FOLDS,
};
pub use evaluate::{
    bags_for, cluster_detail, cluster_evaluate, evaluate_records, mil_evaluate, roc_auc, split_slides, ClusterDetail, ClusterReport, EvalConfig,
    EvalReport, MilReport, SlideSplit, SplitResult, PROTOTYPES_PER_COMPONENT, SPLIT,
};
pub use gmm::{gmm_assign, gmm_fit, gmm_refine, ClusterModel, GmmConfig, DEFAULT_COMPONENTS, DEGENERATE_WEIGHT, VARIANCE_FLOOR};
pub use probe::{kfold_accuracy, LogisticProbe, PROBE_L2};
pub use projection::{project_2d, Pca, ProjectionMethod};
pub use prototypes::{greedy_medoids, hungarian_max, kmedoids_prototypes, match_clusters, ClusterMatching};
pub use records::{
    by_modality, embed_corpus, read_embeddings, registered_pairs, write_embeddings, EmbeddingRecord,
};
