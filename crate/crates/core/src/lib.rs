//! Engine for unsupervised visual feature learning by alternating
//! clustering and classification.
//!
//! The training loop repeatedly (1) extracts features for every image with
//! the current network, (2) reduces, whitens and L2-normalizes them,
//! (3) clusters them with k-means or power iteration clustering, and
//! (4) trains the network for one epoch to predict the cluster assignments
//! as pseudo-labels. Degenerate solutions are held off by empty-cluster
//! reassignment inside k-means and by sampling training examples uniformly
//! over clusters.
//!
//! Everything is deterministic given a seed: the PRNG is pinned, heavy
//! kernels use fixed accumulation orders, and parallel sections merge
//! partial results in a scheduling-independent order.

pub mod dataio;
pub mod error;
pub mod eval;
pub mod featpipe;
pub mod kmeans;
pub mod metrics;
pub mod model;
pub mod pic;
pub mod preprocess;
pub mod rng;
pub mod sampling;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use dataio::Dataset;
pub use error::{Error, Result};
pub use featpipe::{FeatureMatrix, PcaModel};
pub use kmeans::ClusterModel;
pub use model::{NetConfig, NetState};
pub use pic::PicGraph;
pub use rng::SeededRng;
pub use tensor::Tensor;
pub use trainer::TrainConfig;
