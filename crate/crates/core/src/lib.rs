pub mod artifacts;
pub mod audio;
pub mod classes;
pub mod engine;
pub mod evaluation;
pub mod grounding;
pub mod instruction;
pub mod language;
pub mod neural;
pub mod scene;
