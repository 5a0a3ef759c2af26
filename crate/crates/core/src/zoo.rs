//! Convolution chains of common reference architectures.
//!
//! Only the layers on the main path are listed; pooling, projection
//! shortcuts and classifier heads are left out. The ℓ1 norms are synthetic
//! placeholders derived from the parameter counts.

use crate::arch::{FeatureShape, LayerDescriptor, LayerKind, NetworkDescriptor, SkipSpan};

struct Builder {
    layers: Vec<LayerDescriptor>,
    barriers: Vec<usize>,
    spans: Vec<SkipSpan>,
    channels: usize,
    hw: usize,
}

impl Builder {
    fn new(channels: usize, hw: usize) -> Self {
        Builder {
            layers: Vec::new(),
            barriers: Vec::new(),
            spans: Vec::new(),
            channels,
            hw,
        }
    }

    fn position(&self) -> usize {
        self.layers.len()
    }

    fn conv(&mut self, k: usize, stride: usize, out: usize, depthwise: bool, activation: bool) {
        let index = self.layers.len() + 1;
        let out_hw = self.hw.div_ceil(stride);
        let groups = if depthwise { self.channels } else { 1 };
        let params = out * (self.channels / groups) * k * k;
        let wobble = 1.0 + 0.1 * ((index * 37) % 11) as f64;
        self.layers.push(LayerDescriptor {
            index,
            kind: if depthwise {
                LayerKind::DepthwiseConv
            } else {
                LayerKind::StandardConv
            },
            kernel_size: k,
            stride,
            in_channels: self.channels,
            out_channels: out,
            groups,
            in_shape: Some(FeatureShape::new(self.channels, self.hw, self.hw)),
            out_shape: Some(FeatureShape::new(out, out_hw, out_hw)),
            l1_norm: Some(params as f64 * 0.01 * wobble),
            has_activation_after: activation,
        });
        self.channels = out;
        self.hw = out_hw;
    }

    /// A pooling layer or other non-linear operator after the current layer.
    fn barrier(&mut self) {
        self.barriers.push(self.position());
    }

    fn pool(&mut self, stride: usize) {
        self.barrier();
        self.hw = self.hw.div_ceil(stride);
    }

    fn finish(mut self, name: &str) -> NetworkDescriptor {
        if let Some(last) = self.layers.last_mut() {
            last.has_activation_after = false;
        }
        NetworkDescriptor::from_layers(name, self.layers, self.barriers, self.spans)
            .expect("reference architecture is valid")
    }
}

/// ResNet-34 at 224×224: the stem convolution and the 16 basic blocks,
/// 33 layers. Every block is a skip-add span; the downsampling blocks add a
/// projected shortcut, which the stride rule already isolates.
pub fn resnet34() -> NetworkDescriptor {
    let mut b = Builder::new(3, 224);
    b.conv(7, 2, 64, false, true);
    b.pool(2);
    for (stage, (width, blocks)) in [(64, 3), (128, 4), (256, 6), (512, 3)].into_iter().enumerate() {
        for n in 0..blocks {
            let stride = if stage > 0 && n == 0 { 2 } else { 1 };
            let start = b.position();
            b.conv(3, stride, width, false, true);
            b.conv(3, 1, width, false, true);
            b.spans.push(SkipSpan {
                start,
                end: b.position(),
            });
        }
    }
    b.finish("resnet34")
}

/// MobileNetV2 (width 1.0) at 224×224: stem, 17 inverted-residual blocks
/// and the final pointwise convolution, 52 layers. Identity shortcuts of the
/// stride-1 blocks are skip-add spans.
pub fn mobilenet_v2() -> NetworkDescriptor {
    let mut b = Builder::new(3, 224);
    b.conv(3, 2, 32, false, true);
    let config = [
        (1, 16, 1, 1),
        (6, 24, 2, 2),
        (6, 32, 3, 2),
        (6, 64, 4, 2),
        (6, 96, 3, 1),
        (6, 160, 3, 2),
        (6, 320, 1, 1),
    ];
    for (t, c, n, s) in config {
        for rep in 0..n {
            let stride = if rep == 0 { s } else { 1 };
            let start = b.position();
            let input = b.channels;
            if t != 1 {
                b.conv(1, 1, input * t, false, true);
            }
            let hidden = b.channels;
            b.conv(3, stride, hidden, true, true);
            b.conv(1, 1, c, false, false);
            if stride == 1 && input == c {
                b.spans.push(SkipSpan {
                    start,
                    end: b.position(),
                });
            }
        }
    }
    b.conv(1, 1, 1280, false, true);
    b.finish("mobilenet_v2")
}
