pub mod attn;
pub mod eval;
pub mod export;
pub mod fit;
pub mod grad_hist;
pub mod render;
pub mod synth;
