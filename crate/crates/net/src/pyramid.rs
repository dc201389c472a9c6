use crate::tensor::Tensor;

/// Multi-scale feature maps, finest level first. Each level halves the
/// spatial size of the previous one (rounding up).
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
}

impl FeaturePyramid {
    pub fn new(levels: Vec<Tensor>) -> Self {
        Self { levels }
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// The coarsest level; for the prompt encoder this is the embedding.
    pub fn deepest(&self) -> &Tensor {
        self.levels.last().expect("pyramid has at least one level")
    }

    /// `(channels, height, width)` per level.
    pub fn shapes(&self) -> Vec<(usize, usize, usize)> {
        self.levels.iter().map(Tensor::shape).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.levels.iter().all(Tensor::is_finite)
    }
}

/// Spatial size of each pyramid level for an `h x w` input.
pub fn ladder(h: usize, w: usize, levels: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(levels);
    let (mut h, mut w) = (h, w);
    for _ in 0..levels {
        out.push((h, w));
        h = h.div_ceil(2);
        w = w.div_ceil(2);
    }
    out
}
