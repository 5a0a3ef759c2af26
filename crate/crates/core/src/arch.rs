//! Network architecture descriptors.
//!
//! A network is modelled as a chain of `L` convolution layers indexed `1..=L`.
//! Position `l` (for `1 <= l < L`) is the boundary between layer `l` and layer
//! `l + 1`, where the original network may apply an activation. A merge
//! segment `(i, j]` covers layers `i + 1..=j` and is collapsed into one
//! convolution when no activation is kept at any of its interior positions.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::kernel::merged_kernel_size_strided;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    StandardConv,
    DepthwiseConv,
}

/// `(channels, height, width)` of a feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureShape(pub [usize; 3]);

impl FeatureShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        FeatureShape([channels, height, width])
    }

    pub fn channels(&self) -> usize {
        self.0[0]
    }

    pub fn height(&self) -> usize {
        self.0[1]
    }

    pub fn width(&self) -> usize {
        self.0[2]
    }
}

impl fmt::Display for FeatureShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.0[0], self.0[1], self.0[2])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDescriptor {
    pub index: usize,
    pub kind: LayerKind,
    pub kernel_size: usize,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub groups: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_shape: Option<FeatureShape>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_shape: Option<FeatureShape>,
    #[serde(default, deserialize_with = "de_l1_norm", skip_serializing_if = "Option::is_none")]
    pub l1_norm: Option<f64>,
    #[serde(default)]
    pub has_activation_after: bool,
}

impl LayerDescriptor {
    pub fn is_depthwise(&self) -> bool {
        self.kind == LayerKind::DepthwiseConv
    }

    /// `Shape(X^(l-1)) != Shape(X^(l))`, or `None` without shapes.
    pub fn changes_shape(&self) -> Option<bool> {
        Some(self.in_shape? != self.out_shape?)
    }

    fn validate(&self) -> Result<()> {
        let bad = |reason: String| Error::Shape {
            layer: self.index,
            reason,
        };
        if self.kernel_size == 0 || self.stride == 0 {
            return Err(bad("kernel_size and stride must be positive".into()));
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.groups == 0 {
            return Err(bad("channel counts and groups must be positive".into()));
        }
        if !self.in_channels.is_multiple_of(self.groups) || !self.out_channels.is_multiple_of(self.groups) {
            return Err(bad(format!(
                "groups {} must divide in_channels {} and out_channels {}",
                self.groups, self.in_channels, self.out_channels
            )));
        }
        let depthwise_shape = self.groups == self.in_channels && self.groups == self.out_channels;
        // A single-channel dense convolution is also depthwise by shape.
        if self.is_depthwise() != depthwise_shape && !(depthwise_shape && self.groups == 1) {
            return Err(bad(format!(
                "kind {:?} inconsistent with groups {} ({} -> {} channels)",
                self.kind, self.groups, self.in_channels, self.out_channels
            )));
        }
        if let Some(norm) = self.l1_norm {
            if !norm.is_finite() || norm < 0.0 {
                return Err(bad(format!("l1_norm {norm} must be finite and nonnegative")));
            }
        }
        match (self.in_shape, self.out_shape) {
            (None, None) => Ok(()),
            (Some(_), None) | (None, Some(_)) => Err(bad("in_shape and out_shape must be given together".into())),
            (Some(inp), Some(out)) => {
                if inp.channels() != self.in_channels {
                    return Err(bad(format!(
                        "in_shape {inp} disagrees with in_channels {}",
                        self.in_channels
                    )));
                }
                if out.channels() != self.out_channels {
                    return Err(bad(format!(
                        "out_shape {out} disagrees with out_channels {}",
                        self.out_channels
                    )));
                }
                // "same" padding: the spatial extent shrinks only through the stride.
                let expect = |x: usize| x.div_ceil(self.stride);
                if out.height() != expect(inp.height()) || out.width() != expect(inp.width()) {
                    return Err(bad(format!(
                        "out_shape {out} inconsistent with in_shape {inp} at stride {}",
                        self.stride
                    )));
                }
                Ok(())
            }
        }
    }
}

fn de_l1_norm<'de, D: Deserializer<'de>>(de: D) -> std::result::Result<Option<f64>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Norm {
        Num(f64),
        Text(String),
    }
    match Option::<Norm>::deserialize(de)? {
        None => Ok(None),
        Some(Norm::Num(v)) => Ok(Some(v)),
        Some(Norm::Text(s)) => s
            .trim()
            .parse::<f64>()
            .map(Some)
            .map_err(|e| serde::de::Error::custom(format!("bad l1_norm {s:?}: {e}"))),
    }
}

/// A residual skip-addition from the output of position `start` to the output
/// of layer `end`. Serialized as `[start, end]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct SkipSpan {
    pub start: usize,
    pub end: usize,
}

impl From<[usize; 2]> for SkipSpan {
    fn from([start, end]: [usize; 2]) -> Self {
        SkipSpan { start, end }
    }
}

impl From<SkipSpan> for [usize; 2] {
    fn from(s: SkipSpan) -> Self {
        [s.start, s.end]
    }
}

impl SkipSpan {
    /// A segment crosses the span when one of its ends lies strictly inside
    /// the span and the other strictly outside. Such a segment would hide
    /// one operand of the addition inside a merged kernel while the block is
    /// not collapsed into a single layer.
    pub fn crossed_by(&self, i: usize, j: usize) -> bool {
        let inside = |p: usize| self.start < p && p < self.end;
        (i < self.start && inside(j)) || (inside(i) && j > self.end)
    }

    pub fn contains_segment(&self, i: usize, j: usize) -> bool {
        self.start <= i && j <= self.end
    }
}

/// On-disk form of a descriptor, before validation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DescriptorDocument {
    pub name: String,
    pub layers: Vec<LayerDescriptor>,
    #[serde(default)]
    pub irreducible: Vec<usize>,
    #[serde(default)]
    pub barriers: Vec<usize>,
    #[serde(default)]
    pub skip_add_spans: Vec<SkipSpan>,
}

/// A validated, immutable chain network.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkDescriptor {
    name: String,
    layers: Vec<LayerDescriptor>,
    irreducible: BTreeSet<usize>,
    barriers: BTreeSet<usize>,
    skip_add_spans: Vec<SkipSpan>,
}

impl NetworkDescriptor {
    /// Builds a descriptor whose irreducible set is derived from the layer
    /// shapes. Every layer must carry shapes.
    pub fn from_layers(
        name: impl Into<String>,
        layers: Vec<LayerDescriptor>,
        barriers: impl IntoIterator<Item = usize>,
        skip_add_spans: Vec<SkipSpan>,
    ) -> Result<Self> {
        let irreducible = irreducible_from_shapes(&layers)?;
        Self::from_document(DescriptorDocument {
            name: name.into(),
            layers,
            irreducible: irreducible.into_iter().collect(),
            barriers: barriers.into_iter().collect(),
            skip_add_spans,
        })
    }

    pub fn from_document(doc: DescriptorDocument) -> Result<Self> {
        let DescriptorDocument {
            name,
            layers,
            irreducible,
            barriers,
            mut skip_add_spans,
        } = doc;

        if layers.is_empty() {
            return Err(Error::Schema("network has no layers".into()));
        }
        let count = layers.len();
        for (pos, layer) in layers.iter().enumerate() {
            if layer.index != pos + 1 {
                return Err(Error::Schema(format!(
                    "layer indices must run 1..={count} in order; position {} holds index {}",
                    pos + 1,
                    layer.index
                )));
            }
            layer.validate()?;
        }
        if layers[count - 1].has_activation_after {
            return Err(Error::Schema(format!(
                "the last layer ({count}) cannot carry an activation position"
            )));
        }

        let mut declared = BTreeSet::new();
        for &l in &irreducible {
            if !(1..=count).contains(&l) {
                return Err(Error::Schema(format!("irreducible index {l} outside 1..={count}")));
            }
            if !declared.insert(l) {
                return Err(Error::Schema(format!("duplicate irreducible index {l}")));
            }
        }
        if layers.iter().all(|l| l.in_shape.is_some()) {
            let computed = irreducible_from_shapes(&layers)?;
            if computed != declared {
                return Err(Error::IrreducibleMismatch {
                    declared: declared.into_iter().collect(),
                    computed: computed.into_iter().collect(),
                });
            }
        }

        let mut barrier_set = BTreeSet::new();
        for &b in &barriers {
            if b == 0 || b >= count {
                return Err(Error::Schema(format!("barrier {b} outside 1..={}", count - 1)));
            }
            if !barrier_set.insert(b) {
                return Err(Error::Schema(format!("duplicate barrier {b}")));
            }
        }
        barrier_set.extend(stride_rule_barriers(&layers));

        for span in &skip_add_spans {
            if span.start >= span.end || span.end > count {
                return Err(Error::Schema(format!(
                    "skip-add span [{}, {}] must satisfy 0 <= start < end <= {count}",
                    span.start, span.end
                )));
            }
        }
        skip_add_spans.sort();
        skip_add_spans.dedup();
        for (n, a) in skip_add_spans.iter().enumerate() {
            for b in &skip_add_spans[n + 1..] {
                let disjoint = a.end <= b.start || b.end <= a.start;
                let nested = a.contains_segment(b.start, b.end) || b.contains_segment(a.start, a.end);
                if !disjoint && !nested {
                    return Err(Error::Schema(format!(
                        "skip-add spans [{}, {}] and [{}, {}] partially overlap",
                        a.start, a.end, b.start, b.end
                    )));
                }
            }
        }

        Ok(NetworkDescriptor {
            name,
            layers,
            irreducible: declared,
            barriers: barrier_set,
            skip_add_spans,
        })
    }

    pub fn to_document(&self) -> DescriptorDocument {
        DescriptorDocument {
            name: self.name.clone(),
            layers: self.layers.clone(),
            irreducible: self.irreducible.iter().copied().collect(),
            barriers: self.barriers.iter().copied().collect(),
            skip_add_spans: self.skip_add_spans.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("descriptor serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        parse_network(&std::fs::read_to_string(path)?)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Number of convolution layers `L`.
    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn layers(&self) -> &[LayerDescriptor] {
        &self.layers
    }

    /// Layer `l`, 1-based.
    pub fn layer(&self, l: usize) -> &LayerDescriptor {
        &self.layers[l - 1]
    }

    pub fn irreducible(&self) -> &BTreeSet<usize> {
        &self.irreducible
    }

    pub fn barriers(&self) -> &BTreeSet<usize> {
        &self.barriers
    }

    pub fn skip_add_spans(&self) -> &[SkipSpan] {
        &self.skip_add_spans
    }

    /// `K0`, the sum of all original kernel sizes.
    pub fn kernel_sum(&self) -> usize {
        self.layers.iter().map(|l| l.kernel_size).sum()
    }

    /// `{ l : in_shape(l) != out_shape(l) }`.
    pub fn compute_irreducible(&self) -> Result<BTreeSet<usize>> {
        irreducible_from_shapes(&self.layers)
    }

    /// True iff layers `(i, j]` may be merged, i.e. no barrier lies strictly
    /// between `i` and `j`.
    pub fn segment_allowed(&self, i: usize, j: usize) -> bool {
        debug_assert!(i < j && j <= self.len());
        self.barriers.range(i + 1..j).next().is_none()
    }

    pub fn first_barrier_in(&self, i: usize, j: usize) -> Option<usize> {
        self.barriers.range(i + 1..j).next().copied()
    }

    pub fn crossed_span(&self, i: usize, j: usize) -> Option<SkipSpan> {
        self.skip_add_spans.iter().copied().find(|s| s.crossed_by(i, j))
    }

    /// A segment that can appear in a plan: barrier-free and not crossing
    /// any skip-addition span.
    pub fn segment_admissible(&self, i: usize, j: usize) -> bool {
        self.segment_allowed(i, j) && self.crossed_span(i, j).is_none()
    }

    /// All admissible segments in `(i, j)` lexicographic order.
    pub fn admissible_segments(&self) -> Vec<(usize, usize)> {
        let count = self.len();
        let mut out = Vec::new();
        for i in 0..count {
            for j in i + 1..=count {
                if !self.segment_allowed(i, j) {
                    break;
                }
                if self.crossed_span(i, j).is_none() {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Whether layer `l` may be replaced by the identity kernel.
    pub fn is_substitutable(&self, l: usize) -> bool {
        let layer = self.layer(l);
        !self.irreducible.contains(&l) && layer.stride == 1 && layer.in_channels == layer.out_channels
    }

    /// Kernel-size increment contributed by keeping layer `l` inside a
    /// segment starting after position `i`: `(Ker(l) - 1)` scaled by the
    /// product of the strides of layers `i+1..l`.
    pub fn kernel_increments(&self, i: usize, j: usize) -> Vec<usize> {
        let mut scale = 1;
        (i + 1..=j)
            .map(|l| {
                let layer = self.layer(l);
                let inc = (layer.kernel_size - 1) * scale;
                scale *= layer.stride;
                inc
            })
            .collect()
    }

    /// Merged kernel size of segment `(i, j]` when only `keep` is retained.
    pub fn merged_size_of(&self, i: usize, j: usize, keep: &BTreeSet<usize>) -> usize {
        let mut size = 1;
        let mut stride = 1;
        for l in keep.range(i + 1..=j) {
            let layer = self.layer(*l);
            size = merged_kernel_size_strided(size, stride, layer.kernel_size);
            stride *= layer.stride;
        }
        size
    }

    /// Whether the merged layer of `(i, j]` keeping `keep` is depthwise.
    pub fn merged_is_depthwise(&self, i: usize, j: usize, keep: &BTreeSet<usize>) -> bool {
        keep.range(i + 1..=j).all(|&l| self.layer(l).is_depthwise())
    }
}

pub fn parse_network(document: &str) -> Result<NetworkDescriptor> {
    let doc: DescriptorDocument = serde_json::from_str(document).map_err(|e| Error::Schema(e.to_string()))?;
    NetworkDescriptor::from_document(doc)
}

fn irreducible_from_shapes(layers: &[LayerDescriptor]) -> Result<BTreeSet<usize>> {
    let mut out = BTreeSet::new();
    for layer in layers {
        if layer.changes_shape().ok_or(Error::MissingShapes(layer.index))? {
            out.insert(layer.index);
        }
    }
    Ok(out)
}

/// Positions after a strided layer whose successor has a kernel larger
/// than one. Merging across them would inflate the kernel by the stride.
pub fn stride_rule_barriers(layers: &[LayerDescriptor]) -> BTreeSet<usize> {
    layers
        .windows(2)
        .filter(|w| w[0].stride > 1 && w[1].kernel_size > 1)
        .map(|w| w[0].index)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv(index: usize, k: usize, stride: usize, cin: usize, cout: usize, hw: usize) -> LayerDescriptor {
        LayerDescriptor {
            index,
            kind: LayerKind::StandardConv,
            kernel_size: k,
            stride,
            in_channels: cin,
            out_channels: cout,
            groups: 1,
            in_shape: Some(FeatureShape::new(cin, hw, hw)),
            out_shape: Some(FeatureShape::new(cout, hw.div_ceil(stride), hw.div_ceil(stride))),
            l1_norm: Some(1.0),
            has_activation_after: false,
        }
    }

    fn chain(specs: &[(usize, usize)]) -> Vec<LayerDescriptor> {
        // (kernel, stride) on 8 channels, tracking the spatial size.
        let mut hw = 32;
        specs
            .iter()
            .enumerate()
            .map(|(n, &(k, s))| {
                let layer = conv(n + 1, k, s, 8, 8, hw);
                hw = hw.div_ceil(s);
                layer
            })
            .collect()
    }

    #[test]
    fn two_reducible_layers() {
        let json = r#"{
            "name": "pair",
            "layers": [
              {"index": 1, "kind": "standard-conv", "kernel_size": 3, "stride": 1,
               "in_channels": 4, "out_channels": 4, "groups": 1,
               "in_shape": [4, 8, 8], "out_shape": [4, 8, 8], "l1_norm": "1.5",
               "has_activation_after": true},
              {"index": 2, "kind": "standard-conv", "kernel_size": 3, "stride": 1,
               "in_channels": 4, "out_channels": 4, "groups": 1,
               "in_shape": [4, 8, 8], "out_shape": [4, 8, 8], "l1_norm": 2.0,
               "has_activation_after": false}
            ],
            "irreducible": [], "barriers": [], "skip_add_spans": []
        }"#;
        let net = parse_network(json).unwrap();
        assert_eq!(net.len(), 2);
        assert!(net.irreducible().is_empty());
        assert_eq!(net.layer(1).l1_norm, Some(1.5));
        assert_eq!(net.kernel_sum(), 6);
    }

    #[test]
    fn shape_change_must_be_declared() {
        let layers = vec![conv(1, 3, 1, 8, 8, 56), conv(2, 3, 2, 8, 16, 56)];
        let doc = DescriptorDocument {
            name: "n".into(),
            layers: layers.clone(),
            irreducible: vec![],
            barriers: vec![],
            skip_add_spans: vec![],
        };
        assert!(matches!(
            NetworkDescriptor::from_document(doc),
            Err(Error::IrreducibleMismatch { .. })
        ));
        let net = NetworkDescriptor::from_layers("n", layers, [], vec![]).unwrap();
        assert_eq!(net.irreducible().iter().copied().collect::<Vec<_>>(), vec![2]);
    }

    #[test]
    fn irreducible_examples() {
        let net = NetworkDescriptor::from_layers("flat", chain(&[(3, 1); 4]), [], vec![]).unwrap();
        assert!(net.compute_irreducible().unwrap().is_empty());

        let net =
            NetworkDescriptor::from_layers("strided", chain(&[(3, 1), (3, 1), (3, 2), (1, 1), (3, 1)]), [], vec![])
                .unwrap();
        assert_eq!(net.compute_irreducible().unwrap(), BTreeSet::from([3]));

        let expand = vec![conv(1, 1, 1, 16, 96, 8)];
        let net = NetworkDescriptor::from_layers("expand", expand, [], vec![]).unwrap();
        assert_eq!(net.compute_irreducible().unwrap(), BTreeSet::from([1]));
    }

    #[test]
    fn missing_shapes_error() {
        let mut layer = conv(1, 3, 1, 4, 4, 8);
        layer.in_shape = None;
        layer.out_shape = None;
        let doc = DescriptorDocument {
            name: "n".into(),
            layers: vec![layer],
            irreducible: vec![],
            barriers: vec![],
            skip_add_spans: vec![],
        };
        let net = NetworkDescriptor::from_document(doc).unwrap();
        assert!(matches!(net.compute_irreducible(), Err(Error::MissingShapes(1))));
    }

    #[test]
    fn schema_errors() {
        let mut layers = chain(&[(3, 1), (3, 1)]);
        layers[1].index = 5;
        let doc = DescriptorDocument {
            name: "n".into(),
            layers,
            irreducible: vec![],
            barriers: vec![],
            skip_add_spans: vec![],
        };
        assert!(matches!(NetworkDescriptor::from_document(doc), Err(Error::Schema(_))));

        let doc = DescriptorDocument {
            name: "n".into(),
            layers: chain(&[(3, 1), (3, 1)]),
            irreducible: vec![],
            barriers: vec![2],
            skip_add_spans: vec![],
        };
        assert!(matches!(NetworkDescriptor::from_document(doc), Err(Error::Schema(_))));

        assert!(matches!(parse_network("{\"name\": 3}"), Err(Error::Schema(_))));

        let mut bad = chain(&[(3, 1)]);
        bad[0].out_shape = Some(FeatureShape::new(8, 31, 32));
        assert!(matches!(
            NetworkDescriptor::from_layers("n", bad, [], vec![]),
            Err(Error::Shape { layer: 1, .. })
        ));

        let mut dw = chain(&[(3, 1)]);
        dw[0].kind = LayerKind::DepthwiseConv;
        assert!(matches!(
            NetworkDescriptor::from_layers("n", dw, [], vec![]),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn barriers_block_segments() {
        let net = NetworkDescriptor::from_layers("b", chain(&[(3, 1); 4]), [2], vec![]).unwrap();
        assert!(net.segment_allowed(0, 1));
        assert!(net.segment_allowed(0, 2));
        assert!(!net.segment_allowed(1, 3));
        assert!(net.segment_allowed(2, 4));
    }

    #[test]
    fn stride_rule() {
        // stride-2 layer 2 followed by a 3x3: barrier at 2.
        let net = NetworkDescriptor::from_layers("s", chain(&[(3, 1), (3, 2), (3, 1)]), [], vec![]).unwrap();
        assert!(!net.segment_allowed(1, 3));
        // followed by a 1x1: no barrier.
        let net = NetworkDescriptor::from_layers("s", chain(&[(3, 1), (3, 2), (1, 1)]), [], vec![]).unwrap();
        assert!(net.segment_allowed(1, 3));
    }

    #[test]
    fn skip_spans() {
        let net = NetworkDescriptor::from_layers("res", chain(&[(3, 1); 6]), [], vec![SkipSpan { start: 1, end: 4 }])
            .unwrap();
        assert!(net.segment_admissible(1, 4));
        assert!(net.segment_admissible(2, 3));
        assert!(net.segment_admissible(0, 6));
        assert!(net.segment_admissible(0, 1));
        assert!(!net.segment_admissible(0, 2));
        assert!(!net.segment_admissible(3, 5));
        assert!(net.segment_allowed(3, 5));

        let crossing = DescriptorDocument {
            name: "x".into(),
            layers: chain(&[(3, 1); 6]),
            irreducible: vec![],
            barriers: vec![],
            skip_add_spans: vec![SkipSpan { start: 0, end: 3 }, SkipSpan { start: 2, end: 5 }],
        };
        assert!(NetworkDescriptor::from_document(crossing).is_err());
    }

    #[test]
    fn strided_increments() {
        let net = NetworkDescriptor::from_layers("inc", chain(&[(3, 1), (3, 2), (1, 1), (3, 1)]), [], vec![]).unwrap();
        assert_eq!(net.kernel_increments(0, 4), vec![2, 2, 0, 4]);
        let all: BTreeSet<usize> = (1..=4).collect();
        assert_eq!(net.merged_size_of(0, 4, &all), 9);
        assert_eq!(net.merged_size_of(0, 4, &BTreeSet::from([2])), 3);
    }

    #[test]
    fn round_trip_document() {
        let net = NetworkDescriptor::from_layers(
            "rt",
            chain(&[(3, 1), (3, 2), (1, 1)]),
            [1],
            vec![SkipSpan { start: 0, end: 1 }],
        )
        .unwrap();
        let back = parse_network(&net.to_json()).unwrap();
        assert_eq!(back, net);
    }
}
