use serde::{Deserialize, Serialize};

use super::LayerSpec;

/// Named layer stacks for 3x64x64 inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ArchName {
    /// Five conv and three fully connected layers with AlexNet-like layout, reduced widths.
    Full64,
    /// Same depth as `Full64` with far fewer channels; trains in minutes on one core.
    #[default]
    Desk64,
}

impl ArchName {
    pub fn layers(self) -> Vec<LayerSpec> {
        match self {
            ArchName::Full64 => full64(),
            ArchName::Desk64 => desk64(),
        }
    }
}

pub fn full64() -> Vec<LayerSpec> {
    vec![
        LayerSpec::conv(3, 16, 5, 2),
        LayerSpec::ReLU,
        LayerSpec::pool(2),
        LayerSpec::conv(16, 32, 3, 1),
        LayerSpec::ReLU,
        LayerSpec::conv(32, 32, 3, 1),
        LayerSpec::ReLU,
        LayerSpec::pool(2),
        LayerSpec::conv(32, 64, 3, 1),
        LayerSpec::ReLU,
        LayerSpec::conv(64, 64, 3, 1),
        LayerSpec::ReLU,
        LayerSpec::pool(2),
        LayerSpec::fc(64 * 8 * 8, 256),
        LayerSpec::ReLU,
        LayerSpec::Dropout { keep_prob: 0.5 },
        LayerSpec::fc(256, 64),
        LayerSpec::ReLU,
        LayerSpec::fc(64, 2),
        LayerSpec::Softmax,
    ]
}

pub fn desk64() -> Vec<LayerSpec> {
    vec![
        LayerSpec::conv(3, 8, 5, 2),
        LayerSpec::ReLU,
        LayerSpec::pool(4),
        LayerSpec::conv(8, 12, 3, 1),
        LayerSpec::ReLU,
        LayerSpec::conv(12, 16, 3, 1),
        LayerSpec::ReLU,
        LayerSpec::pool(2),
        LayerSpec::conv(16, 16, 3, 1),
        LayerSpec::ReLU,
        LayerSpec::conv(16, 16, 3, 1),
        LayerSpec::ReLU,
        LayerSpec::pool(2),
        LayerSpec::fc(16 * 4 * 4, 64),
        LayerSpec::ReLU,
        LayerSpec::Dropout { keep_prob: 0.5 },
        LayerSpec::fc(64, 32),
        LayerSpec::ReLU,
        LayerSpec::fc(32, 2),
        LayerSpec::Softmax,
    ]
}

/// Two conv layers and one fully connected layer on 3x8x8 inputs, for gradient checks.
pub fn tiny_check_net() -> Vec<LayerSpec> {
    vec![
        LayerSpec::conv(3, 3, 3, 1),
        LayerSpec::ReLU,
        LayerSpec::pool(2),
        LayerSpec::Conv {
            in_channels: 3,
            out_channels: 4,
            kernel_size: 3,
            stride: 1,
            padding: 0,
        },
        LayerSpec::ReLU,
        LayerSpec::Dropout { keep_prob: 0.75 },
        LayerSpec::fc(16, 2),
        LayerSpec::Softmax,
    ]
}
