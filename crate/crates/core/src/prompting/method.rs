use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Adaptation strategy applied to the frozen dual encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// No adaptation.
    ZeroShot,
    /// Every backbone parameter is trained.
    Full,
    /// Only backbone biases (linear and layer-norm shifts) are trained.
    Bias,
    /// Static caption prompts after SOS.
    Tpt,
    /// Deep video prompts shared by all frames, refreshed every layer.
    Vpt,
    /// `Tpt` and `Vpt` together.
    Vop,
    /// Frame-specific prompts from a recurrent context model, inter-frame attention.
    VopC,
    /// `VopC` with intra-frame attention below the boundary layer.
    VopFc,
    /// Frame-specific prompts synthesized from a shared orthogonal basis.
    EgoVpa,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::ZeroShot,
        Method::Full,
        Method::Bias,
        Method::Tpt,
        Method::Vpt,
        Method::Vop,
        Method::VopC,
        Method::VopFc,
        Method::EgoVpa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::ZeroShot => "zero-shot",
            Method::Full => "full",
            Method::Bias => "bias",
            Method::Tpt => "tpt",
            Method::Vpt => "vpt",
            Method::Vop => "vop",
            Method::VopC => "vop-c",
            Method::VopFc => "vop-fc",
            Method::EgoVpa => "ego-vpa",
        }
    }

    pub fn uses_cmm(self) -> bool {
        matches!(self, Method::VopC | Method::VopFc)
    }

    pub fn uses_basis(self) -> bool {
        self == Method::EgoVpa
    }

    /// Whether frame-specific prompts are injected below the boundary layer.
    pub fn frame_prompts(self) -> bool {
        matches!(self, Method::VopC | Method::VopFc | Method::EgoVpa)
    }

    pub fn shared_video_prompts(self) -> bool {
        matches!(self, Method::Vpt | Method::Vop)
    }

    /// Static caption prompts (Ego-VPA may add them when cross-modal synthesis is off).
    pub fn static_text_prompts(self) -> bool {
        matches!(
            self,
            Method::Tpt | Method::Vop | Method::VopC | Method::VopFc
        )
    }

    /// Intra-frame attention below the boundary layer.
    pub fn intra_below_boundary(self) -> bool {
        matches!(self, Method::VopFc | Method::EgoVpa)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::UnknownMethod(s.to_string()))
    }
}
