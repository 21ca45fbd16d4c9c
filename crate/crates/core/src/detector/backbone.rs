//! Toy convolutional backbone shared by the query and support branches.
//! A stack of 3x3 conv+ReLU stages produces the d-channel mid-level map;
//! one more stack produces the 2d-channel high-level map. Both branches
//! call the same functions with the same parameter names, which is what
//! makes the network siamese.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{conv_out, Graph, NodeId};
use crate::error::{FpdError, Result};
use crate::optim::{he_matrix, FreezePolicy, ParamStore};
use ndarray::Array2;

/// One 3x3 conv stage: output channel count and stride (padding 1).
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub stride: usize,
}

/// Backbone layout. `mid_stages` must end at `d` channels and
/// `high_stages` at `2d`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct BackboneConfig {
    pub mid_stages: Vec<ConvSpec>,
    pub high_stages: Vec<ConvSpec>,
    /// Query image (height, width).
    pub input_size: (usize, usize),
    /// Square side support crops are resized to.
    pub support_size: usize,
}

impl BackboneConfig {
    pub fn desk_default(d: usize) -> Self {
        BackboneConfig {
            mid_stages: vec![
                ConvSpec { out_channels: 8, stride: 2 },
                ConvSpec { out_channels: d.max(8) / 2, stride: 2 },
                ConvSpec { out_channels: d, stride: 1 },
            ],
            high_stages: vec![ConvSpec { out_channels: 2 * d, stride: 2 }],
            input_size: (64, 64),
            support_size: 32,
        }
    }

    pub fn d(&self) -> usize {
        self.mid_stages.last().expect("mid stages non-empty").out_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.mid_stages.is_empty() || self.high_stages.is_empty() {
            return Err(FpdError::validation("backbone stages must be non-empty"));
        }
        let d = self.d();
        let high_out = self.high_stages.last().unwrap().out_channels;
        if high_out != 2 * d {
            return Err(FpdError::validation(format!(
                "high stage output {high_out} must be twice the mid output {d}"
            )));
        }
        Ok(())
    }

    /// Cumulative stride of the mid-level map.
    pub fn mid_stride(&self) -> usize {
        self.mid_stages.iter().map(|s| s.stride).product()
    }

    pub fn total_stride(&self) -> usize {
        self.mid_stride() * self.high_stages.iter().map(|s| s.stride).product::<usize>()
    }

    /// Spatial dims of the mid map for a given input.
    pub fn mid_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let mut dims = (h, w);
        for s in &self.mid_stages {
            dims = (conv_out(dims.0, 3, s.stride, 1), conv_out(dims.1, 3, s.stride, 1));
        }
        dims
    }

    pub fn high_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let mut dims = self.mid_dims(h, w);
        for s in &self.high_stages {
            dims = (conv_out(dims.0, 3, s.stride, 1), conv_out(dims.1, 3, s.stride, 1));
        }
        dims
    }
}

/// A graph node carrying its spatial extent.
#[derive(Clone, Copy, Debug)]
pub struct SpatialNode {
    pub id: NodeId,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

/// Register backbone parameters into the store.
pub fn init_backbone(cfg: &BackboneConfig, in_channels: usize, store: &mut ParamStore, rng: &mut impl Rng) {
    let mut cin = in_channels;
    for (i, s) in cfg.mid_stages.iter().enumerate() {
        let fan_in = 9 * cin;
        store.insert(&format!("backbone.mid{i}.w"), he_matrix(rng, fan_in, fan_in, s.out_channels));
        store.insert(&format!("backbone.mid{i}.b"), Array2::zeros((1, s.out_channels)));
        cin = s.out_channels;
    }
    for (i, s) in cfg.high_stages.iter().enumerate() {
        let fan_in = 9 * cin;
        store.insert(&format!("backbone.high{i}.w"), he_matrix(rng, fan_in, fan_in, s.out_channels));
        store.insert(&format!("backbone.high{i}.b"), Array2::zeros((1, s.out_channels)));
        cin = s.out_channels;
    }
}

fn conv_stage(
    g: &mut Graph,
    x: SpatialNode,
    prefix: &str,
    spec: ConvSpec,
    store: &ParamStore,
    frozen: &FreezePolicy,
) -> SpatialNode {
    let cols = g.im2col(x.id, x.h, x.w, 3, spec.stride, 1);
    let w = store.leaf(g, &format!("{prefix}.w"), frozen);
    let b = store.leaf(g, &format!("{prefix}.b"), frozen);
    let y = g.matmul(cols, w);
    let y = g.add_bias(y, b);
    let y = g.relu(y);
    SpatialNode {
        id: y,
        h: conv_out(x.h, 3, spec.stride, 1),
        w: conv_out(x.w, 3, spec.stride, 1),
        c: spec.out_channels,
    }
}

/// Mid-level feature extraction; used identically for query images and
/// support crops.
pub fn extract_mid(
    g: &mut Graph,
    cfg: &BackboneConfig,
    image: NodeId,
    h: usize,
    w: usize,
    in_channels: usize,
    store: &ParamStore,
    frozen: &FreezePolicy,
) -> SpatialNode {
    let mut node = SpatialNode { id: image, h, w, c: in_channels };
    for (i, spec) in cfg.mid_stages.iter().enumerate() {
        node = conv_stage(g, node, &format!("backbone.mid{i}"), *spec, store, frozen);
    }
    node
}

/// High-level stage on top of a (possibly aggregated) mid map.
pub fn extract_high(
    g: &mut Graph,
    cfg: &BackboneConfig,
    mid: SpatialNode,
    store: &ParamStore,
    frozen: &FreezePolicy,
) -> SpatialNode {
    let mut node = mid;
    for (i, spec) in cfg.high_stages.iter().enumerate() {
        node = conv_stage(g, node, &format!("backbone.high{i}"), *spec, store, frozen);
    }
    node
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn stride_arithmetic_matches_config() {
        let cfg = BackboneConfig::desk_default(16);
        cfg.validate().unwrap();
        assert_eq!(cfg.mid_stride(), 4);
        assert_eq!(cfg.total_stride(), 8);
        assert_eq!(cfg.mid_dims(64, 64), (16, 16));
        assert_eq!(cfg.high_dims(64, 64), (8, 8));
        assert_eq!(cfg.mid_dims(32, 32), (8, 8));
    }

    #[test]
    fn query_and_support_paths_share_weights() {
        let cfg = BackboneConfig::desk_default(8);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        init_backbone(&cfg, 3, &mut store, &mut rng);
        let frozen = FreezePolicy::none();

        let mut g = Graph::new();
        let img = crate::optim::normal_matrix(&mut rng, 32 * 32, 3, 1.0);
        let a = g.constant(img.clone());
        let b = g.constant(img);
        let fa = extract_mid(&mut g, &cfg, a, 32, 32, 3, &store, &frozen);
        let fb = extract_mid(&mut g, &cfg, b, 32, 32, 3, &store, &frozen);
        assert_eq!(g.value(fa.id), g.value(fb.id));
        assert_eq!(fa.c, 8);
    }

    #[test]
    fn high_output_is_twice_mid_width() {
        let cfg = BackboneConfig::desk_default(8);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        init_backbone(&cfg, 3, &mut store, &mut rng);
        let frozen = FreezePolicy::none();
        let mut g = Graph::new();
        let img = g.constant(crate::optim::normal_matrix(&mut rng, 64 * 64, 3, 1.0));
        let mid = extract_mid(&mut g, &cfg, img, 64, 64, 3, &store, &frozen);
        let high = extract_high(&mut g, &cfg, mid, &store, &frozen);
        assert_eq!(high.c, 16);
        assert_eq!((high.h, high.w), (8, 8));
    }

    #[test]
    fn mismatched_high_width_fails_validation() {
        let mut cfg = BackboneConfig::desk_default(8);
        cfg.high_stages.last_mut().unwrap().out_channels = 9;
        assert!(cfg.validate().is_err());
    }
}
