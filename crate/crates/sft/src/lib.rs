//! Deformable surface tracking from a template mesh and per-frame 2D point
//! correspondences. A neural parametric surface is optimized online per
//! frame under re-projection, metric-preservation, and temporal losses; a
//! classical iterated-KKT baseline solves the same problem directly on the
//! mesh vertices. A synthetic generator with exact isometric ground truth
//! closes the loop for evaluation.

pub mod classical;
pub mod cli;
pub mod eval;
pub mod geom;
pub mod solver;
pub mod surfnet;
pub mod synth;
