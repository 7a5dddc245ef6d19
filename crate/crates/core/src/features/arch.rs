//! The VGG-16 convolutional trunk layout.
//!
//! Thirteen 3x3 stride-1 convolutions with 2x2 max pooling between the five
//! blocks. `pool_before` marks layers whose input is pooled first, so the
//! table fully describes the trunk without a separate pooling list.

/// One convolution in the trunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvLayerDef {
    pub name: &'static str,
    pub in_ch: usize,
    pub out_ch: usize,
    pub pool_before: bool,
}

pub const VGG16_CONV_LAYERS: [ConvLayerDef; 13] = [
    ConvLayerDef { name: "conv1_1", in_ch: 3, out_ch: 64, pool_before: false },
    ConvLayerDef { name: "conv1_2", in_ch: 64, out_ch: 64, pool_before: false },
    ConvLayerDef { name: "conv2_1", in_ch: 64, out_ch: 128, pool_before: true },
    ConvLayerDef { name: "conv2_2", in_ch: 128, out_ch: 128, pool_before: false },
    ConvLayerDef { name: "conv3_1", in_ch: 128, out_ch: 256, pool_before: true },
    ConvLayerDef { name: "conv3_2", in_ch: 256, out_ch: 256, pool_before: false },
    ConvLayerDef { name: "conv3_3", in_ch: 256, out_ch: 256, pool_before: false },
    ConvLayerDef { name: "conv4_1", in_ch: 256, out_ch: 512, pool_before: true },
    ConvLayerDef { name: "conv4_2", in_ch: 512, out_ch: 512, pool_before: false },
    ConvLayerDef { name: "conv4_3", in_ch: 512, out_ch: 512, pool_before: false },
    ConvLayerDef { name: "conv5_1", in_ch: 512, out_ch: 512, pool_before: true },
    ConvLayerDef { name: "conv5_2", in_ch: 512, out_ch: 512, pool_before: false },
    ConvLayerDef { name: "conv5_3", in_ch: 512, out_ch: 512, pool_before: false },
];

/// Position of each conv layer inside torchvision's `features` sequential
/// container (ReLU and pooling modules occupy the gaps).
pub const TORCHVISION_INDICES: [usize; 13] = [0, 2, 5, 7, 10, 12, 14, 17, 19, 21, 24, 26, 28];

/// Index of a layer by its `convB_N` name.
pub fn layer_index(name: &str) -> Option<usize> {
    VGG16_CONV_LAYERS.iter().position(|l| l.name == name)
}

/// Number of pooling stages applied before the given layer produces its
/// output (equivalently, its downsampling factor is `2^stages`).
pub fn pool_stages(layer_index: usize) -> usize {
    VGG16_CONV_LAYERS[..=layer_index]
        .iter()
        .filter(|l| l.pool_before)
        .count()
}

/// Maps a torchvision tensor name like `features.7.weight` to
/// `(layer index, is_weight)`; anything else (classifier etc.) is `None`.
pub fn parse_torchvision_name(key: &str) -> Option<(usize, bool)> {
    let rest = key.strip_prefix("features.")?;
    let (idx, field) = rest.split_once('.')?;
    let seq: usize = idx.parse().ok()?;
    let layer = TORCHVISION_INDICES.iter().position(|&i| i == seq)?;
    match field {
        "weight" => Some((layer, true)),
        "bias" => Some((layer, false)),
        _ => None,
    }
}

/// Maps a native tensor name like `conv3_2.bias` to `(layer index, is_weight)`.
pub fn parse_native_name(key: &str) -> Option<(usize, bool)> {
    let (name, field) = key.split_once('.')?;
    let layer = layer_index(name)?;
    match field {
        "weight" => Some((layer, true)),
        "bias" => Some((layer, false)),
        _ => None,
    }
}
