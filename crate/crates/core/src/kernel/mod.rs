//! Convolution kernel algebra.
//!
//! Kernels use the cross-correlation convention of mainstream frameworks:
//! `y[o, p] = b[o] + sum_{c, u} W[o, c, u] * x[c, stride * p + u]`. Two
//! convolutions applied back to back without padding or a non-linearity in
//! between are equal to a single convolution whose kernel is the composition
//! of the two, computed here in double precision.

mod conv;
mod io;

use ndarray::{Array1, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use conv::conv_reference;
pub use io::{read_batchnorm, read_kernel, write_kernel, KernelSidecar, SidecarDtype};

/// Convolution parameters: weights of shape `(out, in / groups, k, k)`,
/// one bias per output channel, a stride and a group count.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelTensor {
    weights: Array4<f64>,
    bias: Array1<f64>,
    stride: usize,
    groups: usize,
}

impl KernelTensor {
    pub fn new(weights: Array4<f64>, bias: Array1<f64>, stride: usize, groups: usize) -> Result<Self> {
        let (out, in_per_group, kh, kw) = weights.dim();
        if out == 0 || in_per_group == 0 || kh == 0 {
            return Err(Error::InvalidKernel(format!("empty weight array {:?}", weights.dim())));
        }
        if kh != kw {
            return Err(Error::InvalidKernel(format!("non-square kernel {kh}x{kw}")));
        }
        if stride == 0 || groups == 0 || out % groups != 0 {
            return Err(Error::InvalidKernel(format!(
                "stride {stride} / groups {groups} invalid for {out} output channels"
            )));
        }
        if bias.len() != out {
            return Err(Error::InvalidKernel(format!(
                "bias has {} entries for {out} output channels",
                bias.len()
            )));
        }
        Ok(KernelTensor {
            weights,
            bias,
            stride,
            groups,
        })
    }

    /// Zero-bias kernel.
    pub fn from_weights(weights: Array4<f64>, stride: usize, groups: usize) -> Result<Self> {
        let out = weights.dim().0;
        Self::new(weights, Array1::zeros(out), stride, groups)
    }

    pub fn weights(&self) -> &Array4<f64> {
        &self.weights
    }

    pub fn bias(&self) -> &Array1<f64> {
        &self.bias
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn kernel_size(&self) -> usize {
        self.weights.dim().2
    }

    pub fn out_channels(&self) -> usize {
        self.weights.dim().0
    }

    pub fn in_channels(&self) -> usize {
        self.weights.dim().1 * self.groups
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups == self.in_channels() && self.groups == self.out_channels()
    }

    pub fn into_parts(self) -> (Array4<f64>, Array1<f64>, usize, usize) {
        (self.weights, self.bias, self.stride, self.groups)
    }
}

/// Batch-norm statistics and affine parameters for one convolution output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub epsilon: f64,
}

impl BatchNormParams {
    pub fn identity(channels: usize, epsilon: f64) -> Self {
        BatchNormParams {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            epsilon,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn validate(&self) -> Result<()> {
        let n = self.gamma.len();
        if self.beta.len() != n || self.running_mean.len() != n || self.running_var.len() != n {
            return Err(Error::InvalidKernel("batch-norm vectors differ in length".into()));
        }
        if !(self.epsilon > 0.0) || self.running_var.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidKernel(
                "batch-norm needs epsilon > 0 and nonnegative running variances".into(),
            ));
        }
        Ok(())
    }

    /// Per-channel `(scale, shift)` such that `bn(y) = scale * y + shift`.
    pub fn affine(&self) -> Vec<(f64, f64)> {
        (0..self.channels())
            .map(|c| {
                let scale = self.gamma[c] / (self.running_var[c] + self.epsilon).sqrt();
                (scale, self.beta[c] - self.running_mean[c] * scale)
            })
            .collect()
    }
}

/// The identity as a `1x1` depthwise convolution with unit weights.
pub fn identity_kernel(channels: usize) -> Result<KernelTensor> {
    if channels == 0 {
        return Err(Error::InvalidKernel(
            "identity kernel needs at least one channel".into(),
        ));
    }
    KernelTensor::from_weights(Array4::ones((channels, 1, 1, 1)), 1, channels)
}

/// `1 + sum(k_l - 1)` for a stride-1 stack.
pub fn merged_kernel_size(sizes: &[usize]) -> Result<usize> {
    if sizes.is_empty() {
        return Err(Error::InvalidArgument("merged_kernel_size of an empty stack".into()));
    }
    if sizes.contains(&0) {
        return Err(Error::InvalidArgument("kernel sizes must be positive".into()));
    }
    Ok(1 + sizes.iter().map(|k| k - 1).sum::<usize>())
}

/// Kernel size after merging a `k2` kernel onto a `k1` kernel of stride `s1`.
pub fn merged_kernel_size_strided(k1: usize, s1: usize, k2: usize) -> usize {
    (k2 - 1) * s1 + k1
}

fn gcd(mut a: usize, mut b: usize) -> usize {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Composes `second ∘ first` into one kernel.
///
/// The result has kernel size `(k2 - 1) * s1 + k1`, stride `s1 * s2` and
/// `gcd(g1, g2)` groups, so depthwise stacks stay depthwise and anything
/// mixed with a dense convolution becomes dense. `first`'s bias is pushed
/// through `second`'s weights.
pub fn merge_pair(first: &KernelTensor, second: &KernelTensor) -> Result<KernelTensor> {
    let mid = first.out_channels();
    if second.in_channels() != mid {
        return Err(Error::ChannelMismatch {
            expected: mid,
            found: second.in_channels(),
        });
    }
    let (cin, cout) = (first.in_channels(), second.out_channels());
    let (k1, s1, k2) = (first.kernel_size(), first.stride, second.kernel_size());
    let size = merged_kernel_size_strided(k1, s1, k2);
    let groups = gcd(first.groups, second.groups);

    let first_in_per_group = cin / first.groups;
    let first_out_per_group = mid / first.groups;
    let second_in_per_group = mid / second.groups;
    let second_out_per_group = cout / second.groups;
    let in_per_group = cin / groups;
    let out_per_group = cout / groups;

    let w1 = &first.weights;
    let w2 = &second.weights;
    let mut merged = Array4::<f64>::zeros((cout, in_per_group, size, size));
    let mut bias = Array1::<f64>::zeros(cout);

    for o2 in 0..cout {
        let block2 = o2 / second_out_per_group;
        let block = o2 / out_per_group;
        let mut pushed_bias = 0.0;
        for m in 0..second_in_per_group {
            let o1 = block2 * second_in_per_group + m;
            let block1 = o1 / first_out_per_group;
            let mut tap_sum = 0.0;
            for vy in 0..k2 {
                for vx in 0..k2 {
                    let a = w2[[o2, m, vy, vx]];
                    tap_sum += a;
                    if a == 0.0 {
                        continue;
                    }
                    for c1 in 0..first_in_per_group {
                        let c = block1 * first_in_per_group + c1;
                        let local = c - block * in_per_group;
                        debug_assert!(local < in_per_group);
                        for uy in 0..k1 {
                            for ux in 0..k1 {
                                merged[[o2, local, s1 * vy + uy, s1 * vx + ux]] += a * w1[[o1, c1, uy, ux]];
                            }
                        }
                    }
                }
            }
            pushed_bias += first.bias[o1] * tap_sum;
        }
        bias[o2] = pushed_bias + second.bias[o2];
    }

    KernelTensor::new(merged, bias, s1 * second.stride, groups)
}

/// Merges a stack left to right, substituting the identity for every entry
/// whose `keep` flag is false.
pub fn merge_sequence(kernels: &[KernelTensor], keep: &[bool]) -> Result<KernelTensor> {
    if kernels.is_empty() {
        return Err(Error::InvalidArgument("merge_sequence of an empty stack".into()));
    }
    if kernels.len() != keep.len() {
        return Err(Error::InvalidArgument(format!(
            "{} kernels but {} keep flags",
            kernels.len(),
            keep.len()
        )));
    }
    let mut acc: Option<KernelTensor> = None;
    for (pos, (kernel, &kept)) in kernels.iter().zip(keep).enumerate() {
        let substituted;
        let next = if kept {
            kernel
        } else {
            if kernel.in_channels() != kernel.out_channels() || kernel.stride != 1 {
                return Err(Error::NotSubstitutable {
                    layer: pos + 1,
                    reason: format!(
                        "{} -> {} channels at stride {}",
                        kernel.in_channels(),
                        kernel.out_channels(),
                        kernel.stride
                    ),
                });
            }
            substituted = identity_kernel(kernel.in_channels())?;
            &substituted
        };
        acc = Some(match acc {
            None => next.clone(),
            Some(prev) => merge_pair(&prev, next)?,
        });
    }
    Ok(acc.expect("nonempty stack"))
}

/// Folds an inference-mode batch-norm that follows `kernel` into it.
pub fn fold_batchnorm(kernel: &KernelTensor, bn: &BatchNormParams) -> Result<KernelTensor> {
    bn.validate()?;
    if bn.channels() != kernel.out_channels() {
        return Err(Error::InvalidKernel(format!(
            "batch-norm has {} channels, kernel has {} outputs",
            bn.channels(),
            kernel.out_channels()
        )));
    }
    let mut weights = kernel.weights.clone();
    let mut bias = kernel.bias.clone();
    for (o, (scale, shift)) in bn.affine().into_iter().enumerate() {
        weights.index_axis_mut(ndarray::Axis(0), o).mapv_inplace(|w| w * scale);
        bias[o] = kernel.bias[o] * scale + shift;
    }
    KernelTensor::new(weights, bias, kernel.stride, kernel.groups)
}

/// Adds an identity shortcut to `kernel` (skip-addition fusion). The shortcut
/// lands on the centre tap, which matches a block padded by `(k - 1) / 2`.
pub fn add_identity(kernel: &KernelTensor) -> Result<KernelTensor> {
    let (cin, cout, k) = (kernel.in_channels(), kernel.out_channels(), kernel.kernel_size());
    if cin != cout || kernel.stride != 1 || k % 2 == 0 {
        return Err(Error::InvalidKernel(format!(
            "identity shortcut needs equal channels, stride 1 and an odd kernel \
             (got {cin} -> {cout}, stride {}, size {k})",
            kernel.stride
        )));
    }
    let per_group = cin / kernel.groups;
    let mut weights = kernel.weights.clone();
    let centre = k / 2;
    for c in 0..cout {
        weights[[c, c % per_group, centre, centre]] += 1.0;
    }
    KernelTensor::new(weights, kernel.bias.clone(), 1, kernel.groups)
}
