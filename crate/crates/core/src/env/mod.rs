//! Deterministic synthetic 2.5-D tabletop world: state, kinematic step,
//! rasterizer, scripted expert, and episode generation.

mod episode;
mod expert;
mod render;
mod scenes;
mod types;
mod world;

pub use episode::*;
pub use expert::*;
pub use render::*;
pub use scenes::*;
pub use types::*;
pub use world::*;
