use ndarray::Array3;

use super::KernelTensor;
use crate::error::{Error, Result};

/// Direct cross-correlation of a `(C, H, W)` input with zero padding.
///
/// Accumulates in `f64` and loops over every output tap; this is the
/// reference evaluator that merged kernels are checked against.
pub fn conv_reference(input: &Array3<f64>, kernel: &KernelTensor, padding: usize) -> Result<Array3<f64>> {
    let (channels, height, width) = input.dim();
    if channels != kernel.in_channels() {
        return Err(Error::ChannelMismatch {
            expected: kernel.in_channels(),
            found: channels,
        });
    }
    let k = kernel.kernel_size();
    let stride = kernel.stride();
    let (padded_h, padded_w) = (height + 2 * padding, width + 2 * padding);
    if padded_h < k || padded_w < k {
        return Err(Error::InvalidArgument(format!(
            "input {height}x{width} with padding {padding} is smaller than the {k}x{k} kernel"
        )));
    }
    let out_h = (padded_h - k) / stride + 1;
    let out_w = (padded_w - k) / stride + 1;
    let out_channels = kernel.out_channels();
    let in_per_group = channels / kernel.groups();
    let out_per_group = out_channels / kernel.groups();
    let weights = kernel.weights();
    let bias = kernel.bias();

    let mut out = Array3::<f64>::zeros((out_channels, out_h, out_w));
    for o in 0..out_channels {
        let first_in = (o / out_per_group) * in_per_group;
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut acc = 0.0;
                for c in 0..in_per_group {
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= height as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= width as isize {
                                continue;
                            }
                            acc += weights[[o, c, ky, kx]] * input[[first_in + c, iy as usize, ix as usize]];
                        }
                    }
                }
                out[[o, oy, ox]] = acc + bias[o];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array4};

    #[test]
    fn impulse_response_is_the_flipped_kernel() {
        let w = Array4::from_shape_fn((1, 1, 3, 3), |(_, _, y, x)| (3 * y + x + 1) as f64);
        let kernel = KernelTensor::new(w.clone(), Array1::zeros(1), 1, 1).unwrap();
        let mut x = Array3::<f64>::zeros((1, 5, 5));
        x[[0, 2, 2]] = 1.0;
        let y = conv_reference(&x, &kernel, 1).unwrap();
        assert_eq!(y.dim(), (1, 5, 5));
        // Cross-correlation: output at (2 + dy, 2 + dx) reads w[1 - dy, 1 - dx].
        for dy in -1i32..=1 {
            for dx in -1i32..=1 {
                let out = y[[0, (2 + dy) as usize, (2 + dx) as usize]];
                assert_eq!(out, w[[0, 0, (1 - dy) as usize, (1 - dx) as usize]]);
            }
        }
        assert_eq!(y.sum(), w.sum());
    }

    #[test]
    fn rejects_mismatched_input() {
        let kernel = KernelTensor::from_weights(Array4::ones((2, 3, 3, 3)), 1, 1).unwrap();
        assert!(conv_reference(&Array3::zeros((2, 5, 5)), &kernel, 0).is_err());
        assert!(conv_reference(&Array3::zeros((3, 2, 2)), &kernel, 0).is_err());
    }
}
