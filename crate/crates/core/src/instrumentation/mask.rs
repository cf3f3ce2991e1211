use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Shape `(c, h, w)` of one captured post-ReLU feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl LayerSpec {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

/// Post-ReLU activations of a batch, one `[n, c, h, w]` tensor per capture point.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationSet {
    layers: Vec<Tensor>,
}

impl ActivationSet {
    pub fn new(layers: Vec<Tensor>) -> Result<Self> {
        let n = layers.first().map(|t| t.shape()[0]).ok_or_else(|| Error::Shape("empty activation set".into()))?;
        for (i, t) in layers.iter().enumerate() {
            if t.ndim() != 4 || t.shape()[0] != n {
                return Err(Error::Shape(format!("activation layer {i} has shape {:?}", t.shape())));
            }
            if t.data().iter().any(|&v| v < 0.0) {
                return Err(Error::Data(format!("activation layer {i} has negative entries")));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Tensor] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn batch_size(&self) -> usize {
        self.layers[0].shape()[0]
    }

    /// Per-layer `[c, h, w]` tensors of sample `n`.
    pub fn sample(&self, n: usize) -> Vec<Tensor> {
        self.layers.iter().map(|t| t.index_outer(n)).collect()
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|t| LayerSpec::new(t.shape()[1], t.shape()[2], t.shape()[3])).collect()
    }
}

/// Per-layer mask over one sample's activations.
///
/// A mask is *finalized* when every entry is exactly `0.0` or `1.0`;
/// relaxed masks (training-time values in between) are representable but
/// rejected wherever binary semantics are required.
#[derive(Clone, Debug, PartialEq)]
pub struct PathwayMask {
    layers: Vec<Tensor>,
    firing_sparsity: f64,
    finalized: bool,
}

impl PathwayMask {
    pub fn from_layers(layers: Vec<Tensor>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Mask("a mask needs at least one layer".into()));
        }
        for (i, t) in layers.iter().enumerate() {
            if t.ndim() != 3 {
                return Err(Error::Mask(format!("layer {i} mask must be [c, h, w], got {:?}", t.shape())));
            }
            if !t.is_finite() {
                return Err(Error::Mask(format!("layer {i} mask has non-finite entries")));
            }
        }
        let finalized = layers.iter().all(|t| t.data().iter().all(|&v| v == 0.0 || v == 1.0));
        let firing_sparsity = sparsity_of(&layers);
        Ok(Self { layers, firing_sparsity, finalized })
    }

    /// Builds a binary mask from per-layer bits.
    pub fn from_bits(specs: &[LayerSpec], bits: &[bool]) -> Result<Self> {
        let total: usize = specs.iter().map(LayerSpec::len).sum();
        if bits.len() != total {
            return Err(Error::Mask(format!("expected {total} bits, got {}", bits.len())));
        }
        let mut offset = 0;
        let layers = specs
            .iter()
            .map(|s| {
                let data = bits[offset..offset + s.len()].iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
                offset += s.len();
                Tensor::from_vec(&s.dims(), data).unwrap()
            })
            .collect();
        Self::from_layers(layers)
    }

    pub fn ones(specs: &[LayerSpec]) -> Self {
        Self::from_layers(specs.iter().map(|s| Tensor::ones(&s.dims())).collect()).unwrap()
    }

    pub fn zeros(specs: &[LayerSpec]) -> Self {
        Self::from_layers(specs.iter().map(|s| Tensor::zeros(&s.dims())).collect()).unwrap()
    }

    pub fn layers(&self) -> &[Tensor] {
        &self.layers
    }

    pub fn into_layers(self) -> Vec<Tensor> {
        self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|t| LayerSpec::new(t.shape()[0], t.shape()[1], t.shape()[2])).collect()
    }

    pub fn is_finalized(&self) -> bool {
        self.finalized
    }

    /// Fraction of zero entries over all layers.
    pub fn firing_sparsity(&self) -> f64 {
        self.firing_sparsity
    }

    pub fn recompute_sparsity(&self) -> f64 {
        sparsity_of(&self.layers)
    }

    pub fn layer_sparsity(&self, i: usize) -> f64 {
        sparsity_of(std::slice::from_ref(&self.layers[i]))
    }

    pub fn total_len(&self) -> usize {
        self.layers.iter().map(Tensor::len).sum()
    }

    pub fn count_ones(&self) -> usize {
        self.layers.iter().map(|t| t.data().iter().filter(|&&v| v != 0.0).count()).sum()
    }

    /// All entries flattened layer by layer, true where nonzero.
    pub fn bits(&self) -> Vec<bool> {
        self.layers.iter().flat_map(|t| t.data().iter().map(|&v| v != 0.0)).collect()
    }

    /// Swaps kept and removed positions of a finalized mask.
    pub fn complement(&self) -> Result<Self> {
        self.require_finalized()?;
        Self::from_layers(self.layers.iter().map(|t| t.map(|v| 1.0 - v)).collect())
    }

    pub fn require_finalized(&self) -> Result<()> {
        if self.finalized {
            Ok(())
        } else {
            Err(Error::Mask("mask is not binary; finalize it before this operation".into()))
        }
    }

    pub fn check_specs(&self, specs: &[LayerSpec]) -> Result<()> {
        let own = self.specs();
        if own != specs {
            return Err(Error::Shape(format!("mask layers {own:?} do not match model capture points {specs:?}")));
        }
        Ok(())
    }
}

fn sparsity_of(layers: &[Tensor]) -> f64 {
    let total: usize = layers.iter().map(Tensor::len).sum();
    if total == 0 {
        return 0.0;
    }
    let zeros: usize = layers.iter().map(|t| t.data().iter().filter(|&&v| v == 0.0).count()).sum();
    zeros as f64 / total as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sparsity_is_fraction_of_zeros() {
        let specs = [LayerSpec::new(1, 2, 2), LayerSpec::new(2, 1, 1)];
        let m = PathwayMask::from_bits(&specs, &[true, false, false, true, false, true]).unwrap();
        assert!(m.is_finalized());
        assert!((m.firing_sparsity() - 0.5).abs() < 1e-15);
        assert!((m.recompute_sparsity() - m.firing_sparsity()).abs() <= 1e-12);
        assert_eq!(m.count_ones(), 3);
        let c = m.complement().unwrap();
        assert_eq!(c.count_ones(), 3);
        assert_eq!(c.bits(), vec![false, true, true, false, true, false]);
    }

    #[test]
    fn relaxed_masks_are_not_finalized() {
        let t = Tensor::from_vec(&[1, 1, 2], vec![0.3, 1.0]).unwrap();
        let m = PathwayMask::from_layers(vec![t]).unwrap();
        assert!(!m.is_finalized());
        assert!(m.complement().is_err());
    }

    #[test]
    fn activation_sets_reject_negatives() {
        let t = Tensor::from_vec(&[1, 1, 1, 2], vec![0.0, -1.0]).unwrap();
        assert!(ActivationSet::new(vec![t]).is_err());
    }
}
