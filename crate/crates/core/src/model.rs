//! Backbone, neck and head assembled into one detector.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flops::FlopCount;
use crate::head::{head_forward, HeadConfig, HeadParams, LevelOutput};
use crate::neck::backbone::check_input_extent;
use crate::neck::{neck_forward, BackboneParams, NeckConfig, NeckParams, PYRAMID_STRIDES};
use crate::scalar::Scalar;
use crate::tensor::{seeded_rng, Graph, ParamBuilder, ParamStore, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub neck: NeckConfig,
    pub head: HeadConfig,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { neck: NeckConfig::default(), head: HeadConfig::default(), num_classes: 2 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    pub cfg: ModelConfig,
    pub backbone: BackboneParams,
    pub neck: NeckParams,
    pub head: HeadParams,
}

impl Detector {
    /// Registers every parameter in `store`, seeded by `seed`. Ratio
    /// attention windows resolve against `image_extent`.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &ModelConfig, image_extent: usize, seed: u64) -> Result<Self> {
        if cfg.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        let mut rng = seeded_rng(seed);
        let mut pb = ParamBuilder::new(store, &mut rng);
        let backbone = BackboneParams::new(&mut pb, cfg.neck.backbone_widths);
        let neck = NeckParams::new(&mut pb, &cfg.neck, image_extent)?;
        let head = HeadParams::new(&mut pb, cfg.neck.channels, cfg.num_classes, &cfg.head);
        drop(pb);
        head.init_prior(store, cfg.head.prior);
        Ok(Detector { cfg: cfg.clone(), backbone, neck, head })
    }

    /// Images `[N, 3, H, W]` with `H` and `W` multiples of 64.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, images: Var) -> Result<Vec<LevelOutput>> {
        let (_, _, h, w) = g.value(images).dims4()?;
        check_input_extent(h, w)?;
        self.forward_any_extent(g, images)
    }

    /// Skips the input-extent check so audits can run with pyramid levels
    /// smaller than one cell per stride-64 step. Extents must still be
    /// multiples of 32.
    pub fn forward_any_extent<T: Scalar>(&self, g: &mut Graph<'_, T>, images: Var) -> Result<Vec<LevelOutput>> {
        let (_, c, h, w) = g.value(images).dims4()?;
        if c != 3 || h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
            return Err(Error::shape("detector", format!("need [N, 3, 32k, 32m] images, got {:?}", g.shape(images))));
        }
        let mut x = images;
        let mut features = Vec::with_capacity(4);
        for stage in &self.backbone.stages {
            for layer in stage {
                x = layer.forward(g, x)?;
            }
            features.push(x);
        }
        let pyramid = neck_forward(g, &features, &self.neck, &self.cfg.neck)?;
        head_forward(g, &pyramid, &PYRAMID_STRIDES, &self.head)
    }

    pub fn param_count(&self) -> usize {
        self.backbone.param_count() + self.neck.param_count() + self.head.param_count()
    }

    /// Analytic cost of one forward pass over `n` images of `h x w`.
    pub fn flops(&self, n: usize, h: usize, w: usize) -> Result<FlopCount> {
        let extents: Vec<(usize, usize)> = PYRAMID_STRIDES.iter().map(|s| (h / s, w / s)).collect();
        Ok(self.backbone.flops(n, h, w) + self.neck.flops(&self.cfg.neck, n, h, w)? + self.head.flops(n, &extents))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::WindowSize;
    use crate::gradcheck::{random_tensor, GradCheck};
    use crate::head::{assign_and_loss, BBox, GroundTruth, LossConfig};
    use crate::neck::NeckKind;

    fn tiny(kind: NeckKind) -> ModelConfig {
        let mut cfg = ModelConfig::default();
        cfg.neck.kind = kind;
        cfg.neck.channels = 16;
        cfg.neck.depth = 1;
        cfg.neck.backbone_widths = [16, 16, 16, 16];
        cfg.neck.attention.window = WindowSize::Fixed(2);
        cfg.neck.attention.heads = 2;
        cfg.head.width = 4;
        cfg
    }

    #[test]
    fn analytic_flops_match_graph() {
        for kind in [NeckKind::AttnPafpn, NeckKind::CspPafpn, NeckKind::PlainFpn] {
            let cfg = tiny(kind);
            let mut store = ParamStore::<f32>::new();
            let det = Detector::new(&mut store, &cfg, 128, 3).unwrap();
            assert_eq!(det.param_count(), store.count());
            let mut g = Graph::new(&store);
            let x = g.input(random_tensor(&[1, 3, 128, 128], 1.0, 1).cast());
            let outs = det.forward(&mut g, x).unwrap();
            assert_eq!(outs.len(), 5);
            for (o, s) in outs.iter().zip(PYRAMID_STRIDES) {
                assert_eq!(g.shape(o.cls), [1, 2, 128 / s, 128 / s]);
                assert_eq!(g.shape(o.ltrb), [1, 4, 128 / s, 128 / s]);
            }
            assert_eq!(g.flops(), det.flops(1, 128, 128).unwrap(), "{kind:?}");
        }
    }

    #[test]
    fn rejects_indivisible_images() {
        let mut store = ParamStore::<f32>::new();
        let det = Detector::new(&mut store, &tiny(NeckKind::PlainFpn), 64, 0).unwrap();
        let mut g = Graph::new(&store);
        let x = g.input(crate::Tensor::zeros(&[1, 3, 96, 96]));
        let err = det.forward(&mut g, x).unwrap_err().to_string();
        assert!(err.contains("pad to 128x128"), "{err}");
        assert!(det.forward_any_extent(&mut g, x).is_ok());
    }

    #[test]
    fn full_model_loss_gradcheck() {
        let cfg = tiny(NeckKind::AttnPafpn);
        let mut store = ParamStore::<f64>::new();
        let det = Detector::new(&mut store, &cfg, 32, 4).unwrap();
        let image = random_tensor(&[1, 3, 32, 32], 1.0, 5);
        let gt = vec![GroundTruth::new(vec![(0, BBox::new(4.0, 6.0, 14.0, 15.0)), (1, BBox::new(10.0, 2.0, 30.0, 28.0))])];
        let report = GradCheck { samples_per_param: 4, ..GradCheck::default() }
            .run(&mut store, |g| {
                let x = g.input(image.clone());
                let outs = det.forward_any_extent(g, x)?;
                Ok(assign_and_loss(g, &outs, &gt, &LossConfig::default())?.0)
            })
            .unwrap();
        assert_eq!(report.groups.len(), store.len());
        assert!(report.passed(1e-3), "{:?}", report.failures(1e-3).collect::<Vec<_>>());
    }
}
