use serde::Serialize;

use super::{Method, PromptConfig};
use crate::encoders::EncoderConfig;

/// Parameter counts of one backbone tower.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct TowerCounts {
    pub total: u64,
    /// Linear biases and layer-norm shifts.
    pub biases: u64,
}

pub fn text_tower(cfg: &EncoderConfig) -> TowerCounts {
    let (d, h, l) = (
        cfg.d_txt as u64,
        (cfg.d_txt * cfg.mlp_ratio) as u64,
        cfg.layers as u64,
    );
    let layer = 4 * d + 4 * (d * d + d) + (d * h + h) + (h * d + d);
    let total = cfg.vocab as u64 * d
        + cfg.text_len() as u64 * d
        + l * layer
        + 2 * d
        + d * cfg.d_embed as u64;
    let biases = l * (2 * d + 4 * d + h + d) + d;
    TowerCounts { total, biases }
}

pub fn video_tower(cfg: &EncoderConfig) -> TowerCounts {
    let (d, h, l) = (
        cfg.d_vid as u64,
        (cfg.d_vid * cfg.mlp_ratio) as u64,
        cfg.layers as u64,
    );
    let layer = 6 * d + 8 * (d * d + d) + (d * h + h) + (h * d + d);
    let embed = cfg.patch_dim as u64 * d + d + d + (cfg.patches + cfg.frames) as u64 * d;
    let total = embed + l * layer + 2 * d + d * cfg.d_embed as u64;
    let biases = d + l * (3 * d + 8 * d + h + d) + d;
    TowerCounts { total, biases }
}

/// Closed-form add-on sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Formulas {
    /// `d_f (B + 2 d_vid)`: basis plus video encoder/decoder weights.
    pub ego_vpa_video: u64,
    /// `2 d_f d_txt`: caption encoder/decoder weights.
    pub ego_vpa_text: u64,
    /// `(16 + 2 M_v T) d_vid^2`: recurrent context model weights.
    pub cmm_weights: u64,
    /// LSTM gate biases plus per-frame head biases.
    pub cmm_biases: u64,
}

pub fn formulas(enc: &EncoderConfig, p: &PromptConfig) -> Formulas {
    let (d, df, b) = (enc.d_vid as u64, p.d_f as u64, p.basis_size as u64);
    let (m, t) = (p.m_v as u64, enc.frames as u64);
    Formulas {
        ego_vpa_video: df * (b + 2 * d),
        ego_vpa_text: 2 * df * enc.d_txt as u64,
        cmm_weights: (16 + 2 * m * t) * d * d,
        cmm_biases: 8 * d + t * m * d,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamBreakdown {
    pub method: Method,
    pub trainable: u64,
    pub frozen: u64,
    /// Size of the dual encoder the fraction is taken against.
    pub backbone: u64,
    /// `trainable / backbone`.
    pub fraction: f64,
    /// Trainable counts per component, in a fixed order.
    pub groups: Vec<(String, u64)>,
}

/// Exact parameter accounting for `method` without building the model.
pub fn count_params(enc: &EncoderConfig, p: &PromptConfig, method: Method) -> ParamBreakdown {
    let text = text_tower(enc);
    let video = video_tower(enc);
    let backbone = text.total + video.total;
    let f = formulas(enc, p);
    let text_prompts = (p.m_t * enc.d_txt) as u64;
    let mut groups: Vec<(String, u64)> = Vec::new();
    match method {
        Method::ZeroShot => {}
        Method::Full => {
            groups.push(("text_backbone".into(), text.total));
            groups.push(("video_backbone".into(), video.total));
        }
        Method::Bias => {
            groups.push(("text_biases".into(), text.biases));
            groups.push(("video_biases".into(), video.biases));
        }
        Method::Tpt => groups.push(("text_prompts".into(), text_prompts)),
        Method::Vpt | Method::Vop => {
            if method == Method::Vop {
                groups.push(("text_prompts".into(), text_prompts));
            }
            groups.push((
                "video_prompts".into(),
                (enc.layers * p.m_v * enc.d_vid) as u64,
            ));
        }
        Method::VopC | Method::VopFc => {
            groups.push(("text_prompts".into(), text_prompts));
            groups.push(("cmm_weights".into(), f.cmm_weights));
            groups.push(("cmm_biases".into(), f.cmm_biases));
        }
        Method::EgoVpa => {
            groups.push(("basis".into(), (p.basis_size * p.d_f) as u64));
            groups.push(("video_adapter".into(), (2 * enc.d_vid * p.d_f) as u64));
            if p.cross_modal {
                groups.push(("text_adapter".into(), f.ego_vpa_text));
            } else {
                groups.push(("text_prompts".into(), text_prompts));
            }
        }
    }
    let trainable: u64 = groups.iter().map(|(_, c)| c).sum();
    let frozen = match method {
        Method::Full => 0,
        Method::Bias => backbone - trainable,
        _ => backbone,
    };
    ParamBreakdown {
        method,
        trainable,
        frozen,
        backbone,
        fraction: trainable as f64 / backbone as f64,
        groups,
    }
}
