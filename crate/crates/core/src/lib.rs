//! Learning the structure of separable (or zero-discord) bipartite quantum
//! states with a convolutional autoencoder, classifying density matrices by
//! reconstruction error, and searching for PPT states the classifier
//! rejects.

pub mod boundgen;
pub mod cae;
pub mod linalg;
pub mod nn;
pub mod pipeline;
pub mod states;
