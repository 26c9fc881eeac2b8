pub mod data;
pub mod engine;
pub mod error;
pub mod fam;
pub mod feature;
pub mod ftm;
pub mod layout;
pub mod losses;
pub mod params;
pub mod rng;
pub mod spectral;
pub mod tensor;
pub mod zoo;

pub use data::{Dataset, SynthConfig};
pub use engine::{distill, pretrain_teacher, Checkpoint, Config, DistillRecipe, RunReport};
pub use error::{Error, Result};
pub use fam::{fam_forward, fam_forward_frozen, fam_init, interp_align, FamOutput, FamParams, FamSpec, InterpMode};
pub use feature::{Source, StageFeature};
pub use ftm::{ftm_forward, FtmConfig, FtmOutput};
pub use layout::Layout;
pub use losses::{LossBreakdown, LossWeights};
pub use params::{Bindings, Param, ParameterRegistry};
pub use rng::SeededRng;
pub use tensor::{Grads, Tape, Tensor, Var};
pub use zoo::{Family, Model, ModelSpec};
