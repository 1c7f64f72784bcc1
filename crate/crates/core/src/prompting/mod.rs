//! Prompt generators: the shared orthogonal basis with closed-form subspace
//! selection and synthesis, static prompts, and the recurrent context model.

mod accounting;
mod basis;
mod cmm;
mod config;
mod method;
mod synth;

pub use accounting::{
    count_params, formulas, text_tower, video_tower, Formulas, ParamBreakdown, TowerCounts,
};
pub use basis::{
    dots, gram_offdiag_max, mixture_distribution, orthonormal_rows, record, renormalize_rows,
    select_sampled, select_topk, PromptBasis, SamplerState, SubspaceSelection,
};
pub use cmm::{Cmm, LstmDirection};
pub use config::{PromptConfig, QueryMode, TextSynthesis};
pub use method::Method;
pub use synth::{
    orth_penalty, project, recon_loss, recon_losses, syn_loss, synthesize, OrthPenalty, RECON_EPS,
};

#[cfg(test)]
mod tests;
