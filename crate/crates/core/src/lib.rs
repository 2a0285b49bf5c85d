//! Speech emotion recognition across languages from frozen frame embeddings
//! and a few labeled source-language samples.

pub mod checkpoint;
pub mod dsp;
pub mod error;
pub mod idfe;
pub mod irf;
pub mod manifest;
pub mod model;
pub mod pca;
pub mod report;
pub mod tensor_file;
pub mod toy;
pub mod trainer;
pub mod tric;

pub use checkpoint::Checkpoint;
pub use error::{Result, SereError};
pub use irf::IrfParams;
pub use model::{Encoded, SereModel, TricParams, Utterance};
pub use tric::{Batch, PrototypeSet};
pub use trainer::{Dataset, EvalReport, Labeled, TrainConfig, TrainOutcome};
