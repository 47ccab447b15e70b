//! The masked diffusion transformer: parameters, forward pass, exact
//! analytic gradients, finite-difference validation, and checkpointing.

pub mod backward;
pub mod checkpoint;
pub mod forward;
pub mod gradcheck;
pub mod params;

pub use backward::{backward, HeadGradients, ParameterGradients};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use forward::{
    embed_input, encoder_forward, forward, heads_forward, modulate, time_features, ForwardTrace,
    LN_EPS,
};
pub use gradcheck::{gradient_check, GradCheckGroup, GradCheckReport, REL_ERR_FLOOR};
pub use params::{
    LayerLayout, ModelConfig, ModelParameters, ParamLayout, FFN_EXPANSION, INIT_STD,
    TIME_FEAT_DIM,
};
