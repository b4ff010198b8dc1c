//! Embedding analysis: LDA reduction, exact t-SNE and accent regrouping.

mod cluster;
mod lda;
mod tsne;

pub use cluster::{
    adjusted_rand_index, kmeans, knn_purity, nearest, remap_accents, GroupSpec, KMeans, RemapOverride, RemapTable,
    KMEANS_RESTARTS,
};
pub use lda::{lda_reduce, Lda};
pub use tsne::{tsne, TsneConfig};
