//! Materializing planned segments as single convolutions.

use std::collections::BTreeSet;

use ndarray::{s, Array3};

use crate::arch::NetworkDescriptor;
use crate::error::{Error, Result};
use crate::kernel::{add_identity, conv_reference, identity_kernel, merge_pair, KernelTensor};
use crate::planner::MergePlan;

fn check_inputs(net: &NetworkDescriptor, start: usize, end: usize, kernels: &[KernelTensor]) -> Result<()> {
    if kernels.len() != net.len() {
        return Err(Error::InvalidArgument(format!(
            "expected {} kernels, got {}",
            net.len(),
            kernels.len()
        )));
    }
    if start >= end || end > net.len() {
        return Err(Error::SegmentNotAllowed {
            i: start,
            j: end,
            reason: format!("indices must satisfy 0 <= i < j <= {}", net.len()),
        });
    }
    for l in start + 1..=end {
        let (layer, kernel) = (net.layer(l), &kernels[l - 1]);
        if kernel.kernel_size() != layer.kernel_size
            || kernel.stride() != layer.stride
            || kernel.groups() != layer.groups
            || kernel.in_channels() != layer.in_channels
            || kernel.out_channels() != layer.out_channels
        {
            return Err(Error::InvalidKernel(format!(
                "kernel for layer {l} does not match its descriptor"
            )));
        }
    }
    Ok(())
}

/// Skip-add spans fully inside `(a, b]`, outermost first for each start.
fn span_from(net: &NetworkDescriptor, p: usize, b: usize, exclude: Option<(usize, usize)>) -> Option<usize> {
    net.skip_add_spans()
        .iter()
        .filter(|s| s.start == p && s.end <= b && Some((s.start, s.end)) != exclude)
        .map(|s| s.end)
        .max()
}

fn fuse_range(
    net: &NetworkDescriptor,
    a: usize,
    b: usize,
    keep: &BTreeSet<usize>,
    kernels: &[KernelTensor],
    inside_span: bool,
) -> Result<KernelTensor> {
    let exclude = inside_span.then_some((a, b));
    let mut acc: Option<KernelTensor> = None;
    let mut p = a;
    while p < b {
        let (next, block) = match span_from(net, p, b, exclude) {
            Some(e) => (e, add_identity(&fuse_range(net, p, e, keep, kernels, true)?)?),
            None => {
                let l = p + 1;
                let block = if keep.contains(&l) {
                    kernels[l - 1].clone()
                } else if net.is_substitutable(l) {
                    identity_kernel(net.layer(l).in_channels)?
                } else {
                    return Err(Error::NotSubstitutable {
                        layer: l,
                        reason: "layer is dropped from the keep set".into(),
                    });
                };
                (l, block)
            }
        };
        acc = Some(match acc {
            None => block,
            Some(prev) => merge_pair(&prev, &block)?,
        });
        p = next;
    }
    Ok(acc.expect("nonempty range"))
}

/// Single convolution equivalent to layers `(start, end]` with the
/// activations inside removed, the layers outside `keep` replaced by the
/// identity, and every skip-addition inside the segment fused in.
///
/// `kernels[l - 1]` holds layer `l`'s (batch-norm folded) kernel.
pub fn merge_segment(
    net: &NetworkDescriptor,
    start: usize,
    end: usize,
    keep: &BTreeSet<usize>,
    kernels: &[KernelTensor],
) -> Result<KernelTensor> {
    check_inputs(net, start, end, kernels)?;
    if let Some(span) = net.crossed_span(start, end) {
        return Err(Error::SegmentNotAllowed {
            i: start,
            j: end,
            reason: format!("cuts the skip-add span [{}, {}]", span.start, span.end),
        });
    }
    fuse_range(net, start, end, keep, kernels, false)
}

/// Merged kernel for every segment of `plan`, in segment order.
pub fn merge_plan(net: &NetworkDescriptor, plan: &MergePlan, kernels: &[KernelTensor]) -> Result<Vec<KernelTensor>> {
    let keep: BTreeSet<usize> = plan.kept_convs.iter().copied().collect();
    plan.segments
        .iter()
        .map(|s| merge_segment(net, s.start, s.end, &keep, kernels))
        .collect()
}

/// Zero-pads the spatial dimensions of `x` by `pad` on every side.
pub fn pad_input(x: &Array3<f64>, pad: usize) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let mut out = Array3::zeros((c, h + 2 * pad, w + 2 * pad));
    out.slice_mut(s![.., pad..pad + h, pad..pad + w]).assign(x);
    out
}

fn crop(x: &Array3<f64>, offset: usize, h: usize, w: usize) -> Array3<f64> {
    x.slice(s![.., offset..offset + h, offset..offset + w]).to_owned()
}

fn run_range(
    net: &NetworkDescriptor,
    a: usize,
    b: usize,
    keep: &BTreeSet<usize>,
    kernels: &[KernelTensor],
    x: Array3<f64>,
    inside_span: bool,
) -> Result<Array3<f64>> {
    let exclude = inside_span.then_some((a, b));
    let mut x = x;
    let mut p = a;
    while p < b {
        match span_from(net, p, b, exclude) {
            Some(e) => {
                let y = run_range(net, p, e, keep, kernels, x.clone(), true)?;
                let (_, h, w) = y.dim();
                let (_, hx, _) = x.dim();
                let skip = crop(&x, (hx - h) / 2, h, w);
                x = y + skip;
                p = e;
            }
            None => {
                let l = p + 1;
                if keep.contains(&l) {
                    x = conv_reference(&x, &kernels[l - 1], 0)?;
                } else if !net.is_substitutable(l) {
                    return Err(Error::NotSubstitutable {
                        layer: l,
                        reason: "layer is dropped from the keep set".into(),
                    });
                }
                p = l;
            }
        }
    }
    Ok(x)
}

/// Applies the layers of `(start, end]` one after another without padding
/// and without activations: the reference the merged kernel must reproduce
/// on the same (already padded) input.
pub fn evaluate_sequential(
    net: &NetworkDescriptor,
    start: usize,
    end: usize,
    keep: &BTreeSet<usize>,
    kernels: &[KernelTensor],
    input: &Array3<f64>,
) -> Result<Array3<f64>> {
    check_inputs(net, start, end, kernels)?;
    run_range(net, start, end, keep, kernels, input.clone(), false)
}

/// Largest absolute deviation over the common top-left window of the two
/// maps, relative to the largest magnitude of `reference` in that window.
/// Strided stacks may produce one row or column more than the merged layer
/// when the input size is not aligned to the total stride.
pub fn relative_error(actual: &Array3<f64>, reference: &Array3<f64>) -> f64 {
    let (ca, ha, wa) = actual.dim();
    let (cr, hr, wr) = reference.dim();
    assert_eq!(ca, cr, "channel mismatch");
    let (h, w) = (ha.min(hr), wa.min(wr));
    let a = actual.slice(s![.., ..h, ..w]);
    let r = reference.slice(s![.., ..h, ..w]);
    let scale = r.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    a.iter().zip(r.iter()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}
