pub mod corpora;
pub mod diagnostics;
pub mod harness;
pub mod minilang;
pub mod model;
pub mod numcore;
pub mod par;
pub mod pruning;
pub mod recovery;
