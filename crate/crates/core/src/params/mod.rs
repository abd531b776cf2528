//! Parameter containers, models with analytic gradients, and dataset handling.

pub mod idx;
pub mod model;
pub mod partition;
pub mod shard;
pub mod synthetic;
pub mod transform;
pub mod vector;

pub use idx::{load_idx, write_idx_images, write_idx_labels};
pub use model::{Activation, Model, ModelKind};
pub use partition::{dirichlet_partition, iid_partition, train_test_split};
pub use shard::{Batch, ClientShard, Dataset, DatasetSplit};
pub use transform::{apply_feature_transform, decode_transform, TransformKind};
pub use vector::{Layer, ParameterVector};
