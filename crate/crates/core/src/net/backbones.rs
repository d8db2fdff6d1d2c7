//! Desk-scale reference backbones.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::LayerSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    /// Eight conv-BN-ReLU layers, two max-pools, average-pool + linear head.
    Convnet8,
    /// Same depth with two-conv residual blocks.
    Resnet8,
}

fn conv_bn_relu(out: &mut Vec<LayerSpec>, cin: usize, cout: usize) {
    out.push(LayerSpec::Conv2d {
        in_channels: cin,
        out_channels: cout,
        kernel: 3,
        stride: 1,
        padding: 1,
    });
    out.push(LayerSpec::BatchNorm2d { channels: cout });
    out.push(LayerSpec::Relu);
}

fn classifier(out: &mut Vec<LayerSpec>, channels: usize, spatial: usize, num_classes: usize) {
    out.push(LayerSpec::AvgPool2d {
        window: 2,
        stride: 2,
    });
    out.push(LayerSpec::Flatten);
    out.push(LayerSpec::Linear {
        in_features: channels * (spatial / 2) * (spatial / 2),
        out_features: num_classes,
    });
}

const POOL: LayerSpec = LayerSpec::MaxPool2d {
    window: 2,
    stride: 2,
};

/// Layer list for a reference backbone on `3 × size × size` inputs with
/// stage widths `[a, b, c]`.
pub fn backbone(kind: BackboneKind, widths: [usize; 3], size: usize, num_classes: usize) -> Result<Vec<LayerSpec>> {
    if size % 8 != 0 || size < 8 {
        return Err(Error::invalid(format!(
            "reference backbones need a spatial size divisible by 8, got {size}"
        )));
    }
    if widths.contains(&0) || num_classes == 0 {
        return Err(Error::invalid("widths and class count must be positive"));
    }
    let [a, b, c] = widths;
    let mut l = Vec::new();
    match kind {
        BackboneKind::Convnet8 => {
            conv_bn_relu(&mut l, 3, a);
            conv_bn_relu(&mut l, a, a);
            l.push(POOL);
            conv_bn_relu(&mut l, a, b);
            conv_bn_relu(&mut l, b, b);
            conv_bn_relu(&mut l, b, b);
            l.push(POOL);
            conv_bn_relu(&mut l, b, c);
            conv_bn_relu(&mut l, c, c);
            conv_bn_relu(&mut l, c, c);
        }
        BackboneKind::Resnet8 => {
            conv_bn_relu(&mut l, 3, a);
            l.push(LayerSpec::ResidualBlock { channels: a });
            l.push(POOL);
            conv_bn_relu(&mut l, a, b);
            l.push(LayerSpec::ResidualBlock { channels: b });
            l.push(POOL);
            conv_bn_relu(&mut l, b, c);
            conv_bn_relu(&mut l, c, c);
        }
    }
    classifier(&mut l, c, size / 4, num_classes);
    Ok(l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::placement::{place_exits, profile};
    use crate::net::DEFAULT_EXIT_FRACTIONS;

    fn conv_count(layers: &[LayerSpec]) -> usize {
        layers
            .iter()
            .map(|l| match l {
                LayerSpec::Conv2d { .. } => 1,
                LayerSpec::ResidualBlock { .. } => 2,
                _ => 0,
            })
            .sum()
    }

    #[test]
    fn both_variants_have_eight_convolutions() {
        for kind in [BackboneKind::Convnet8, BackboneKind::Resnet8] {
            let l = backbone(kind, [8, 16, 32], 32, 10).unwrap();
            assert_eq!(conv_count(&l), 8);
            let prof = profile(&l, &[3, 32, 32]).unwrap();
            assert_eq!(prof.output_shapes.last().unwrap(), &vec![10]);
        }
    }

    #[test]
    fn default_fractions_give_six_internal_exits() {
        let l = backbone(BackboneKind::Convnet8, [8, 16, 32], 32, 10).unwrap();
        let exits = place_exits(&l, &[3, 32, 32], &DEFAULT_EXIT_FRACTIONS).unwrap();
        assert_eq!(exits.len(), 6, "{exits:?}");
    }

    #[test]
    fn residual_blocks_are_coarser_placement_units() {
        // 0.45 and 0.60 both land on the conv after the first pool
        let l = backbone(BackboneKind::Resnet8, [8, 16, 32], 32, 10).unwrap();
        let exits = place_exits(&l, &[3, 32, 32], &DEFAULT_EXIT_FRACTIONS).unwrap();
        assert_eq!(exits.len(), 5, "{exits:?}");
    }
}
