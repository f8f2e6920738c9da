//! Image and language encoders behind stable interfaces.

mod backbone;
mod preprocess;
mod projection;
mod text;

pub use backbone::{Backbone, BackboneConfig, ImageEncoder, ImageFeature, StageConfig};
pub use preprocess::{hflip_chw, stack, ImageInput};
pub use projection::Projection;
pub use text::{
    encode_text_contextual, text_tokens, ContextualEncoder, MeanPoolEncoder, RecurrentEncoder, StaticVectorEncoder,
    TextEncoder, TextEncoderKind, WordIndex, WordVectors,
};
