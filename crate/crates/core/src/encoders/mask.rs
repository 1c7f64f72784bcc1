use serde::{Deserialize, Serialize};

use crate::numcore::{AttentionMask, Real, Tensor};

/// Prompt visibility regime of a spatial attention block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// A patch sees only the prompts of its own frame.
    Intra,
    /// A patch sees the prompts of every frame.
    Inter,
}

/// Role of one row in a video token sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Token {
    Cls,
    /// `frame` is `None` for prompts shared by all frames.
    Prompt {
        frame: Option<usize>,
    },
    Patch {
        frame: usize,
        patch: usize,
    },
}

/// Spatial-block visibility between two tokens of the same video.
pub fn spatial_visible(mode: AttentionMode, q: Token, k: Token) -> bool {
    let frame = match q {
        Token::Cls | Token::Prompt { frame: None } => return true,
        Token::Prompt { frame: Some(f) } | Token::Patch { frame: f, .. } => f,
    };
    match k {
        Token::Cls | Token::Prompt { frame: None } => true,
        Token::Prompt { frame: Some(g) } => mode == AttentionMode::Inter || g == frame,
        Token::Patch { frame: g, .. } => g == frame,
    }
}

/// Temporal-block visibility: a patch sees CLS and the same location in every
/// frame; CLS and prompts see only themselves.
pub fn temporal_visible(q: Token, k: Token, same_row: bool) -> bool {
    match (q, k) {
        (Token::Patch { patch: p, .. }, Token::Patch { patch: r, .. }) => p == r,
        (Token::Patch { .. }, Token::Cls) => true,
        _ => same_row,
    }
}

/// Spatial mask for one video laid out as `(CLS, P^1..P^T, patches frame-major)`
/// with `m_v` prompts per frame.
pub fn build_mask(
    mode: AttentionMode,
    frames: usize,
    patches: usize,
    m_v: usize,
) -> Vec<Vec<bool>> {
    let layout = VideoLayout::new(1, frames, patches, PromptSlots::PerFrame(m_v));
    // reorder batch layout rows into the documented single-item order
    let mut order = vec![0];
    order.extend(layout.prompt_rows(0));
    order.extend(1..1 + frames * patches);
    order
        .iter()
        .map(|&i| {
            order
                .iter()
                .map(|&j| spatial_visible(mode, layout.token(i), layout.token(j)))
                .collect()
        })
        .collect()
}

/// How many prompt rows a video carries and whether they belong to frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptSlots {
    None,
    /// `m` prompts visible to every frame.
    Shared(usize),
    /// `m` prompts per frame.
    PerFrame(usize),
}

impl PromptSlots {
    pub fn per_item(self, frames: usize) -> usize {
        match self {
            PromptSlots::None => 0,
            PromptSlots::Shared(m) => m,
            PromptSlots::PerFrame(m) => m * frames,
        }
    }
}

/// Row layout of a batch of videos: every item's CLS and patches first
/// (item-major, frame-major within an item), then every item's prompts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VideoLayout {
    pub items: usize,
    pub frames: usize,
    pub patches: usize,
    pub slots: PromptSlots,
}

impl VideoLayout {
    pub fn new(items: usize, frames: usize, patches: usize, slots: PromptSlots) -> Self {
        Self {
            items,
            frames,
            patches,
            slots,
        }
    }

    fn block(&self) -> usize {
        1 + self.frames * self.patches
    }

    pub fn prompts_per_item(&self) -> usize {
        self.slots.per_item(self.frames)
    }

    /// Rows holding CLS and patch tokens.
    pub fn content_rows(&self) -> usize {
        self.items * self.block()
    }

    pub fn rows(&self) -> usize {
        self.content_rows() + self.items * self.prompts_per_item()
    }

    pub fn cls_row(&self, item: usize) -> usize {
        item * self.block()
    }

    pub fn patch_row(&self, item: usize, frame: usize, patch: usize) -> usize {
        item * self.block() + 1 + frame * self.patches + patch
    }

    pub fn prompt_rows(&self, item: usize) -> std::ops::Range<usize> {
        let m = self.prompts_per_item();
        let start = self.content_rows() + item * m;
        start..start + m
    }

    /// Owning item and role of a row.
    pub fn token(&self, row: usize) -> Token {
        self.locate(row).1
    }

    pub fn locate(&self, row: usize) -> (usize, Token) {
        let c = self.content_rows();
        if row < c {
            let item = row / self.block();
            let r = row % self.block();
            if r == 0 {
                return (item, Token::Cls);
            }
            let r = r - 1;
            return (
                item,
                Token::Patch {
                    frame: r / self.patches,
                    patch: r % self.patches,
                },
            );
        }
        let m = self.prompts_per_item();
        let r = row - c;
        let (item, slot) = (r / m, r % m);
        let frame = match self.slots {
            PromptSlots::PerFrame(per) => Some(slot / per),
            _ => None,
        };
        (item, Token::Prompt { frame })
    }

    pub fn spatial_mask(&self, mode: AttentionMode) -> AttentionMask {
        let n = self.rows();
        let loc: Vec<_> = (0..n).map(|r| self.locate(r)).collect();
        AttentionMask::from_fn(n, n, |i, j| {
            loc[i].0 == loc[j].0 && spatial_visible(mode, loc[i].1, loc[j].1)
        })
    }

    pub fn temporal_mask(&self) -> AttentionMask {
        let n = self.rows();
        let loc: Vec<_> = (0..n).map(|r| self.locate(r)).collect();
        AttentionMask::from_fn(n, n, |i, j| {
            loc[i].0 == loc[j].0 && temporal_visible(loc[i].1, loc[j].1, i == j)
        })
    }

    /// `[items*frames x rows]` averaging matrix: row `(i, f)` holds `1/N_p` on
    /// the patches of frame `f` of item `i`.
    pub fn frame_pool<S: Real>(&self) -> Tensor<S> {
        let n = self.rows();
        let mut t = Tensor::zeros(&[self.items * self.frames, n]);
        let w = S::one() / S::of(self.patches as f64);
        for i in 0..self.items {
            for f in 0..self.frames {
                for p in 0..self.patches {
                    t.set(i * self.frames + f, self.patch_row(i, f, p), w);
                }
            }
        }
        t
    }

    /// `[rows x d]` indicator with ones on content rows and zeros on prompt rows.
    pub fn content_indicator<S: Real>(&self, d: usize) -> Tensor<S> {
        let mut t = Tensor::zeros(&[self.rows(), d]);
        for r in 0..self.content_rows() {
            t.row_mut(r).iter_mut().for_each(|v| *v = S::one());
        }
        t
    }
}

/// Row layout of a batch of captions: every item's tokens (variable length,
/// SOS first and EOS last), then every item's prompts. Prompts sit right after
/// SOS in causal order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextLayout {
    /// Token count per item including SOS and EOS.
    pub lens: Vec<usize>,
    pub prompts: usize,
    starts: Vec<usize>,
}

impl TextLayout {
    pub fn new(lens: Vec<usize>, prompts: usize) -> Self {
        let mut starts = Vec::with_capacity(lens.len());
        let mut acc = 0;
        for &l in &lens {
            starts.push(acc);
            acc += l;
        }
        Self {
            lens,
            prompts,
            starts,
        }
    }

    pub fn items(&self) -> usize {
        self.lens.len()
    }

    pub fn content_rows(&self) -> usize {
        self.lens.iter().sum()
    }

    pub fn rows(&self) -> usize {
        self.content_rows() + self.items() * self.prompts
    }

    pub fn token_row(&self, item: usize, pos: usize) -> usize {
        self.starts[item] + pos
    }

    pub fn eos_row(&self, item: usize) -> usize {
        self.starts[item] + self.lens[item] - 1
    }

    pub fn prompt_rows(&self, item: usize) -> std::ops::Range<usize> {
        let start = self.content_rows() + item * self.prompts;
        start..start + self.prompts
    }

    /// Owning item and causal position of a row.
    pub fn locate(&self, row: usize) -> (usize, usize) {
        let c = self.content_rows();
        if row >= c {
            let r = row - c;
            return (r / self.prompts, 1 + r % self.prompts);
        }
        let item = self.starts.partition_point(|&s| s <= row) - 1;
        let pos = row - self.starts[item];
        (item, if pos == 0 { 0 } else { pos + self.prompts })
    }

    pub fn causal_mask(&self) -> AttentionMask {
        let n = self.rows();
        let loc: Vec<_> = (0..n).map(|r| self.locate(r)).collect();
        AttentionMask::from_fn(n, n, |i, j| loc[i].0 == loc[j].0 && loc[j].1 <= loc[i].1)
    }
}
