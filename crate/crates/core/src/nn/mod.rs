//! Toy-scale U-Net with hand-written backpropagation, class-weighted
//! cross-entropy, Adam, a plateau learning-rate schedule and the training loop.

mod adam;
mod gradcheck;
pub mod layers;
mod loss;
mod tensor;
mod train;
mod unet;

pub use adam::{adam_step, plateau_update, AdamState, Plateau};
pub use gradcheck::{gradient_check, gradient_check_with, CheckLoss, GradCheckOptions, GradCheckReport};
pub use loss::{class_weights_from_proportion, total_weight, weighted_ce_loss, weighted_ce_sample};
pub use tensor::{Scalar, Tensor};
pub use train::{
    format_sig6, predict_scores, split_index, train, train_with, EpochRecord, TrainConfig,
    TrainHistory, TrainOutput,
};
pub use unet::{unet_backward, unet_forward, unet_init, Activation, ForwardCache};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("input {width}x{height} not divisible by 2^{depth}")]
    IndivisibleInput {
        width: usize,
        height: usize,
        depth: usize,
    },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("parameter vector has length {found}, config needs {expected}")]
    ParamLength { expected: usize, found: usize },
    #[error("forward cache does not match this backward call: {0}")]
    StaleCache(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("class proportion {0} must lie strictly inside (0, 1)")]
    BadProportion(f64),
    #[error("dataset too small: {0}")]
    DatasetTooSmall(String),
    #[error(transparent)]
    Stats(#[from] crate::stats::StatsError),
    #[error(transparent)]
    Augment(#[from] crate::augment::AugmentError),
}

/// Architecture hyper-parameters that fix every weight shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UNetConfig {
    /// Number of 2x down-sampling stages.
    pub depth: usize,
    /// Channels at the top level; level `l` has `base_channels << l`.
    pub base_channels: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self::new(3, 8)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    /// 3x3, zero padding 1, weight `[out][in][3][3]`.
    Conv3,
    /// 2x2 stride-2 transposed conv, weight `[in][out][2][2]`.
    UpConv2,
    /// 1x1, weight `[out][in]`.
    Conv1,
}

impl BlockKind {
    pub fn kernel_area(self) -> usize {
        match self {
            BlockKind::Conv3 => 9,
            BlockKind::UpConv2 => 4,
            BlockKind::Conv1 => 1,
        }
    }
}

/// One weight+bias pair inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamBlock {
    pub kind: BlockKind,
    pub in_ch: usize,
    pub out_ch: usize,
    pub offset: usize,
}

impl ParamBlock {
    pub fn weight_len(&self) -> usize {
        self.in_ch * self.out_ch * self.kind.kernel_area()
    }
    pub fn len(&self) -> usize {
        self.weight_len() + self.out_ch
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    pub fn fan_in(&self) -> usize {
        self.in_ch * self.kind.kernel_area()
    }
    pub fn weights<'a, T>(&self, params: &'a [T]) -> &'a [T] {
        &params[self.offset..self.offset + self.weight_len()]
    }
    pub fn bias<'a, T>(&self, params: &'a [T]) -> &'a [T] {
        &params[self.offset + self.weight_len()..self.offset + self.len()]
    }
    pub fn split_mut<'a, T>(&self, params: &'a mut [T]) -> (&'a mut [T], &'a mut [T]) {
        params[self.offset..self.offset + self.len()].split_at_mut(self.weight_len())
    }
    pub fn bias_range(&self) -> std::ops::Range<usize> {
        self.offset + self.weight_len()..self.offset + self.len()
    }
}

/// Canonical parameter layout, in serialization order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    /// `[conv1, conv2]` for each encoder level, shallow to deep.
    pub encoder: Vec<[ParamBlock; 2]>,
    pub bottleneck: [ParamBlock; 2],
    /// `[up, conv1, conv2]` indexed by level; stored deep to shallow.
    pub decoder: Vec<[ParamBlock; 3]>,
    pub head: ParamBlock,
    pub total: usize,
}

const MAX_CHANNELS: usize = 1 << 16;

impl UNetConfig {
    pub fn new(depth: usize, base_channels: usize) -> Self {
        Self {
            depth,
            base_channels,
            in_channels: 3,
            out_channels: 2,
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.depth == 0 || self.depth > 16 {
            return Err(NnError::InvalidConfig(format!("depth {}", self.depth)));
        }
        // the widest level stays small enough that parameter counts cannot overflow
        if self.base_channels == 0 || self.base_channels > MAX_CHANNELS >> self.depth {
            return Err(NnError::InvalidConfig(format!(
                "base_channels {}",
                self.base_channels
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(NnError::InvalidConfig("zero in/out channels".into()));
        }
        if self.in_channels > MAX_CHANNELS || self.out_channels > MAX_CHANNELS {
            return Err(NnError::InvalidConfig("too many in/out channels".into()));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn check_input(&self, width: usize, height: usize) -> Result<(), NnError> {
        let m = 1usize << self.depth;
        if width == 0 || height == 0 || width % m != 0 || height % m != 0 {
            return Err(NnError::IndivisibleInput {
                width,
                height,
                depth: self.depth,
            });
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        let mut offset = 0;
        let mut block = |kind, in_ch, out_ch| {
            let b = ParamBlock {
                kind,
                in_ch,
                out_ch,
                offset,
            };
            offset += b.len();
            b
        };
        let mut encoder = Vec::with_capacity(self.depth);
        let mut prev = self.in_channels;
        for l in 0..self.depth {
            let c = self.channels(l);
            encoder.push([
                block(BlockKind::Conv3, prev, c),
                block(BlockKind::Conv3, c, c),
            ]);
            prev = c;
        }
        let cb = self.channels(self.depth);
        let bottleneck = [
            block(BlockKind::Conv3, prev, cb),
            block(BlockKind::Conv3, cb, cb),
        ];
        let mut decoder_deep_first = Vec::with_capacity(self.depth);
        for l in (0..self.depth).rev() {
            let c = self.channels(l);
            decoder_deep_first.push([
                block(BlockKind::UpConv2, self.channels(l + 1), c),
                block(BlockKind::Conv3, 2 * c, c),
                block(BlockKind::Conv3, c, c),
            ]);
        }
        let head = block(BlockKind::Conv1, self.base_channels, self.out_channels);
        decoder_deep_first.reverse();
        Layout {
            encoder,
            bottleneck,
            decoder: decoder_deep_first,
            head,
            total: offset,
        }
    }

    /// Length of the flat parameter vector.
    pub fn param_count(&self) -> usize {
        self.layout().total
    }

    /// All blocks in canonical order.
    pub fn blocks(&self) -> Vec<ParamBlock> {
        let l = self.layout();
        let mut out: Vec<ParamBlock> = l.encoder.iter().flatten().copied().collect();
        out.extend(l.bottleneck);
        for level in (0..self.depth).rev() {
            out.extend(l.decoder[level]);
        }
        out.push(l.head);
        out
    }
}
