//! Question encoding and visual feature grids.

mod features;
mod gru;
mod question;

pub use features::{
    load_features, synth_features, write_features, FeatureGrid, GridSynthSpec, PlantedGrid,
    PlantedObject, Prototypes,
};
pub use gru::GruCell;
pub use question::{QuestionEncoder, UNK};
