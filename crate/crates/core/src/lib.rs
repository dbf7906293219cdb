pub mod codec;
pub mod corpus;
pub mod eval;
pub mod model;
pub mod presets;
pub mod tensor;
pub mod text;
pub mod train;
