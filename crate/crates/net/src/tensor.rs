//! Single-sample CHW feature maps and the parameter-free ops between layers.

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), channels * height * width, "tensor size mismatch");
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

pub const LEAKY_SLOPE: f32 = 0.1;

pub fn leaky_relu_inplace(t: &mut Tensor) {
    for v in &mut t.data {
        if *v < 0.0 {
            *v *= LEAKY_SLOPE;
        }
    }
}

/// Backward of leaky ReLU, using the activation output (its sign matches
/// the input's since the slope is positive).
pub fn leaky_relu_backward(output: &Tensor, grad: &mut Tensor) {
    for (g, &y) in grad.data.iter_mut().zip(&output.data) {
        if y < 0.0 {
            *g *= LEAKY_SLOPE;
        }
    }
}

/// Nearest-neighbour upsampling to `(height, width)`, which must be at most
/// twice the input size.
pub fn upsample2(t: &Tensor, height: usize, width: usize) -> Tensor {
    let mut out = Tensor::zeros(t.channels, height, width);
    for c in 0..t.channels {
        let src = t.plane(c);
        let dst = &mut out.data[c * height * width..(c + 1) * height * width];
        for y in 0..height {
            let sy = (y / 2).min(t.height - 1);
            for x in 0..width {
                let sx = (x / 2).min(t.width - 1);
                dst[y * width + x] = src[sy * t.width + sx];
            }
        }
    }
    out
}

pub fn upsample2_backward(grad: &Tensor, height: usize, width: usize) -> Tensor {
    let mut out = Tensor::zeros(grad.channels, height, width);
    for c in 0..grad.channels {
        let src = grad.plane(c);
        let dst = &mut out.data[c * height * width..(c + 1) * height * width];
        for y in 0..grad.height {
            let sy = (y / 2).min(height - 1);
            for x in 0..grad.width {
                let sx = (x / 2).min(width - 1);
                dst[sy * width + sx] += src[y * grad.width + x];
            }
        }
    }
    out
}

/// Channel concatenation of maps sharing a spatial size.
pub fn concat(parts: &[&Tensor]) -> Tensor {
    let (h, w) = (parts[0].height, parts[0].width);
    let mut data = Vec::with_capacity(parts.iter().map(|p| p.data.len()).sum());
    let mut channels = 0;
    for p in parts {
        assert_eq!((p.height, p.width), (h, w), "concat spatial mismatch");
        data.extend_from_slice(&p.data);
        channels += p.channels;
    }
    Tensor::from_vec(channels, h, w, data)
}

/// Splits a concatenated gradient back into per-part gradients.
pub fn split_channels(grad: &Tensor, channels: &[usize]) -> Vec<Tensor> {
    let n = grad.plane_len();
    let mut offset = 0;
    channels
        .iter()
        .map(|&c| {
            let t = Tensor::from_vec(c, grad.height, grad.width, grad.data[offset * n..(offset + c) * n].to_vec());
            offset += c;
            t
        })
        .collect()
}

/// `softplus(x) + floor`, a strictly positive output mapping.
pub fn softplus(x: f32) -> f32 {
    if x > 20.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsample_backward_is_adjoint() {
        let x = Tensor::from_vec(1, 2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let g = Tensor::from_vec(1, 4, 5, (0..20).map(|i| i as f32 * 0.5 - 3.0).collect());
        let up = upsample2(&x, 4, 5);
        let lhs: f32 = up.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let back = upsample2_backward(&g, 2, 3);
        let rhs: f32 = x.data.iter().zip(&back.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }

    #[test]
    fn concat_then_split_round_trips() {
        let a = Tensor::from_vec(1, 1, 2, vec![1.0, 2.0]);
        let b = Tensor::from_vec(2, 1, 2, vec![3.0, 4.0, 5.0, 6.0]);
        let c = concat(&[&a, &b]);
        assert_eq!(c.channels, 3);
        let parts = split_channels(&c, &[1, 2]);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn softplus_is_positive_and_stable() {
        assert!(softplus(-50.0) >= 0.0);
        assert_eq!(softplus(100.0), 100.0);
        assert!((softplus(0.0) - std::f32::consts::LN_2).abs() < 1e-6);
    }
}
