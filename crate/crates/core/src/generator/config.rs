use serde::{Deserialize, Serialize};

use crate::autograd::DaqParams;
use crate::error::{Error, Result};
use crate::instrumentation::LayerSpec;

/// Hyperparameters of the pathway generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Capture-point shapes of the target model, in forward order.
    pub layers: Vec<LayerSpec>,
    /// Common `(h', w')` resolution of the embedded feature patterns.
    pub shared_resolution: (usize, usize),
    /// Recursive-block filter size `(h_g, w_g)` per layer.
    pub filter_sizes: Vec<(usize, usize)>,
    /// Number of fully connected layers in the shared scorer.
    pub pdn_depth: usize,
    /// Hidden width of the shared scorer.
    pub pdn_hidden: usize,
    pub quant_bits: u32,
    pub quant_lower: f64,
    pub quant_upper: f64,
    /// Soft-assignment temperature used in training mode.
    pub tau: f64,
    /// Whether recursive blocks normalize after every iteration.
    pub normalize: bool,
    pub norm_eps: f64,
    pub norm_momentum: f64,
    /// Initial bias of each decoder's final iteration, i.e. the starting
    /// level of the decoded scores.
    pub score_init: f64,
    pub seed: u64,
}

/// Number of recursive iterations that brings a `spec`-shaped map to
/// `shared` with filter `filter`.
///
/// A layer already at the shared resolution runs once with symmetric zero
/// padding, which requires odd filter sides.
pub fn rfe_iteration_count(spec: &LayerSpec, shared: (usize, usize), filter: (usize, usize)) -> Result<usize> {
    let (h, w) = (spec.height, spec.width);
    let (th, tw) = shared;
    if h < th || w < tw {
        return Err(Error::Config(format!("layer {h}x{w} is smaller than the shared resolution {th}x{tw}")));
    }
    if filter.0 == 0 || filter.1 == 0 {
        return Err(Error::Config("filter sides must be positive".into()));
    }
    if h == th && w == tw {
        if filter.0.is_multiple_of(2) || filter.1.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "layer {h}x{w} is at the shared resolution and needs an odd padded filter, got {}x{}",
                filter.0, filter.1
            )));
        }
        return Ok(1);
    }
    let steps = |len: usize, target: usize, k: usize| -> Result<Option<usize>> {
        let gap = len - target;
        if gap == 0 {
            return if k == 1 {
                Ok(None)
            } else {
                Err(Error::Config(format!("side {len} already matches {target}; its filter side must be 1")))
            };
        }
        if k < 2 || !gap.is_multiple_of(k - 1) {
            let valid: Vec<usize> = (1..=gap).filter(|d| gap.is_multiple_of(*d)).map(|d| d + 1).collect();
            return Err(Error::Config(format!(
                "filter side {k} cannot reduce {len} to {target}; valid filter sides are {valid:?}"
            )));
        }
        Ok(Some(gap / (k - 1)))
    };
    match (steps(h, th, filter.0)?, steps(w, tw, filter.1)?) {
        (Some(a), Some(b)) if a != b => Err(Error::Config(format!(
            "filter {}x{} needs {a} iterations vertically but {b} horizontally",
            filter.0, filter.1
        ))),
        (Some(a), _) | (None, Some(a)) => Ok(a),
        (None, None) => unreachable!(),
    }
}

/// Smallest filter (sides >= 2) satisfying the divisibility constraint,
/// or the 3x3 padded filter for layers already at the shared resolution.
pub fn auto_filter_size(spec: &LayerSpec, shared: (usize, usize)) -> Result<(usize, usize)> {
    let (h, w) = (spec.height, spec.width);
    if h == shared.0 && w == shared.1 {
        return Ok((3, 3));
    }
    let (gh, gw) = (h.checked_sub(shared.0), w.checked_sub(shared.1));
    let (Some(gh), Some(gw)) = (gh, gw) else {
        return Err(Error::Config(format!("layer {h}x{w} is smaller than the shared resolution")));
    };
    if gh == 0 {
        return Ok((1, 2));
    }
    if gw == 0 {
        return Ok((2, 1));
    }
    // Fix the vertical side at the smallest choice; the horizontal side
    // must then produce the same iteration count.
    for kh in 2..=gh + 1 {
        if gh % (kh - 1) != 0 {
            continue;
        }
        let iters = gh / (kh - 1);
        if gw % iters == 0 {
            return Ok((kh, gw / iters + 1));
        }
    }
    Err(Error::Config(format!("no filter reduces {h}x{w} to {}x{}", shared.0, shared.1)))
}

impl GeneratorConfig {
    /// Defaults for a target model: shared resolution is the smallest
    /// captured resolution, filters are auto-chosen, two-layer scorer
    /// whose hidden width equals its input width.
    pub fn for_layers(layers: &[LayerSpec]) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("generator needs at least one layer".into()));
        }
        let shared = (
            layers.iter().map(|s| s.height).min().unwrap(),
            layers.iter().map(|s| s.width).min().unwrap(),
        );
        let filter_sizes = layers.iter().map(|s| auto_filter_size(s, shared)).collect::<Result<Vec<_>>>()?;
        let width: usize = layers.iter().map(|s| s.channels * shared.0 * shared.1).sum();
        Ok(Self {
            layers: layers.to_vec(),
            shared_resolution: shared,
            filter_sizes,
            pdn_depth: 2,
            pdn_hidden: width,
            quant_bits: 1,
            quant_lower: 0.0,
            quant_upper: 1.0,
            tau: 0.2,
            normalize: true,
            norm_eps: 1e-5,
            norm_momentum: 0.1,
            score_init: 0.75,
            seed: 0,
        })
    }

    pub fn pdn_width(&self) -> usize {
        let (h, w) = self.shared_resolution;
        self.layers.iter().map(|s| s.channels * h * w).sum()
    }

    pub fn iterations(&self, layer: usize) -> usize {
        rfe_iteration_count(&self.layers[layer], self.shared_resolution, self.filter_sizes[layer]).expect("validated config")
    }

    pub fn is_padded(&self, layer: usize) -> bool {
        let s = &self.layers[layer];
        (s.height, s.width) == self.shared_resolution
    }

    pub fn padding(&self, layer: usize) -> (usize, usize) {
        if self.is_padded(layer) {
            let (kh, kw) = self.filter_sizes[layer];
            ((kh - 1) / 2, (kw - 1) / 2)
        } else {
            (0, 0)
        }
    }

    pub fn daq(&self) -> DaqParams {
        DaqParams { bits: self.quant_bits, lower: self.quant_lower, upper: self.quant_upper, tau: self.tau }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("generator needs at least one layer".into()));
        }
        if self.filter_sizes.len() != self.layers.len() {
            return Err(Error::Config(format!(
                "{} filter sizes for {} layers",
                self.filter_sizes.len(),
                self.layers.len()
            )));
        }
        let (h, w) = self.shared_resolution;
        if h == 0 || w == 0 {
            return Err(Error::Config("shared resolution must be positive".into()));
        }
        for (spec, &filter) in self.layers.iter().zip(&self.filter_sizes) {
            rfe_iteration_count(spec, self.shared_resolution, filter)?;
        }
        if self.pdn_depth == 0 || self.pdn_hidden == 0 {
            return Err(Error::Config("scorer depth and width must be positive".into()));
        }
        if !(1..=8).contains(&self.quant_bits) {
            return Err(Error::Config(format!("quant_bits must be in 1..=8, got {}", self.quant_bits)));
        }
        if !(self.quant_lower < self.quant_upper) {
            return Err(Error::Config(format!(
                "quantization bounds need lower < upper, got {} and {}",
                self.quant_lower, self.quant_upper
            )));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config("soft-assignment temperature must be positive".into()));
        }
        Ok(())
    }

    /// Checks the config against a target model's capture points.
    pub fn check_model(&self, specs: &[LayerSpec]) -> Result<()> {
        if self.layers != specs {
            return Err(Error::Config(format!(
                "generator was configured for {:?} but the model captures {:?}",
                self.layers, specs
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sq(c: usize, s: usize) -> LayerSpec {
        LayerSpec::new(c, s, s)
    }

    #[test]
    fn iteration_counts() {
        assert_eq!(rfe_iteration_count(&sq(1, 32), (4, 4), (5, 5)).unwrap(), 7);
        assert_eq!(rfe_iteration_count(&sq(1, 4), (4, 4), (3, 3)).unwrap(), 1);
        assert_eq!(rfe_iteration_count(&sq(1, 8), (4, 4), (3, 3)).unwrap(), 2);
    }

    #[test]
    fn non_divisible_filters_list_alternatives() {
        let err = rfe_iteration_count(&sq(1, 8), (4, 4), (4, 4)).unwrap_err().to_string();
        assert!(err.contains("[2, 3, 5]"), "{err}");
        assert!(rfe_iteration_count(&sq(1, 4), (4, 4), (2, 2)).is_err());
        assert!(rfe_iteration_count(&sq(1, 2), (4, 4), (3, 3)).is_err());
    }

    #[test]
    fn auto_filters_pick_smallest() {
        assert_eq!(auto_filter_size(&sq(1, 16), (4, 4)).unwrap(), (2, 2));
        assert_eq!(auto_filter_size(&sq(1, 4), (4, 4)).unwrap(), (3, 3));
        let rect = LayerSpec::new(1, 8, 12);
        let f = auto_filter_size(&rect, (4, 4)).unwrap();
        assert_eq!(f, (2, 3));
        assert_eq!(rfe_iteration_count(&rect, (4, 4), f).unwrap(), 4);
    }

    #[test]
    fn defaults_for_toy_layers() {
        let cfg = GeneratorConfig::for_layers(&[sq(8, 16), sq(16, 8), sq(16, 4)]).unwrap();
        assert_eq!(cfg.shared_resolution, (4, 4));
        assert_eq!(cfg.pdn_width(), (8 + 16 + 16) * 16);
        assert_eq!(cfg.pdn_hidden, cfg.pdn_width());
        assert_eq!(cfg.iterations(0), 12);
        assert_eq!(cfg.iterations(1), 4);
        assert_eq!(cfg.iterations(2), 1);
        assert_eq!(cfg.padding(2), (1, 1));
        cfg.validate().unwrap();
        let mut bad = cfg.clone();
        bad.quant_lower = 1.0;
        assert!(bad.validate().is_err());
    }
}
