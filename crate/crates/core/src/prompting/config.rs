use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How basis prompts are chosen while training. Evaluation always uses top-k.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QueryMode {
    TopK,
    /// Draws from the similarity / inverse-frequency mixture.
    Sampled,
}

/// Which layers synthesize caption prompts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TextSynthesis {
    /// Once, at the input layer.
    Input,
    /// At every layer below the boundary, like the video prompts.
    PerLayer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    /// Video prompts per frame (`M_v`); static and recurrent methods.
    pub m_v: usize,
    /// Caption prompts (`M_t`).
    pub m_t: usize,
    /// Layers `0..boundary` use intra-frame attention and receive fresh
    /// frame-specific prompts; the remaining layers use inter-frame attention.
    pub boundary: usize,
    /// Basis size `B`.
    pub basis_size: usize,
    /// Latent width `d_f`.
    pub d_f: usize,
    /// Basis prompts per query `k`; also the synthesized prompt count.
    pub top_k: usize,
    /// Share the basis with the caption tower.
    pub cross_modal: bool,
    pub query: QueryMode,
    /// Temperature of the similarity distribution used while sampling.
    pub sim_temperature: f64,
    pub text_synthesis: TextSynthesis,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl PromptConfig {
    pub fn toy() -> Self {
        Self {
            m_v: 8,
            m_t: 8,
            boundary: 3,
            basis_size: 10,
            d_f: 16,
            top_k: 8,
            cross_modal: true,
            query: QueryMode::Sampled,
            sim_temperature: 0.1,
            text_synthesis: TextSynthesis::Input,
        }
    }

    pub fn full_size() -> Self {
        Self {
            boundary: 8,
            d_f: 512,
            ..Self::toy()
        }
    }

    pub fn validate(&self, layers: usize) -> Result<()> {
        if self.boundary > layers {
            return Err(Error::Config(format!(
                "prompt.boundary = {} exceeds encoder.layers = {layers}",
                self.boundary
            )));
        }
        if self.basis_size == 0 || self.d_f == 0 {
            return Err(Error::Config(
                "prompt.basis_size and prompt.d_f must be positive".into(),
            ));
        }
        if self.basis_size > self.d_f {
            return Err(Error::Config(format!(
                "prompt.basis_size = {} cannot exceed prompt.d_f = {} for an orthonormal basis",
                self.basis_size, self.d_f
            )));
        }
        if self.top_k == 0 || self.top_k > self.basis_size {
            return Err(Error::Config(format!(
                "prompt.top_k = {} must lie in 1..={}",
                self.top_k, self.basis_size
            )));
        }
        if !(self.sim_temperature > 0.0) {
            return Err(Error::Config(
                "prompt.sim_temperature must be positive".into(),
            ));
        }
        Ok(())
    }
}
