//! Low-dimensional embedding of training segments (exact t-SNE over a
//! precomputed distance matrix) and the regression network that reproduces it
//! for unseen inputs.

pub mod mlp;
pub mod tsne;

pub use mlp::{map_input, train_mapping, Activation, MappingNetwork, NetConfig};
pub use tsne::{joint_probabilities, tsne_embed, EmbeddedSet, EmbeddingConfig};
