//! Multi-exit models: a backbone with internal classifier heads attached at
//! chosen layers, plus the per-exit compute table.

mod backbones;
mod checkpoint;
mod head;
mod placement;
mod train;

pub use backbones::{backbone, BackboneKind};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION,
};
pub use head::{ExitHead, HeadCache, HEAD_POOL};
pub use placement::{
    count_macs, eligible_attach_points, final_stage_start, place_exits, place_exits_by_cost,
    profile, LayerProfile, DEFAULT_EXIT_FRACTIONS,
};
pub use train::{
    augment_batch, default_exit_weights, evaluate_accuracy, lr_at, train_joint, train_with_loss,
    BatchLoss, EpochLog, JointCrossEntropy, StepContext, StepOutput, TrainConfig, TrainLog,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{BatchNorm2d, Cache, Layer, LayerSpec, Real, Sequential, Tensor};

/// Architecture of a multi-exit model before placement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub backbone: Vec<LayerSpec>,
    /// Per-sample input shape `[C, H, W]`.
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub exit_fractions: Vec<f64>,
}

impl ModelSpec {
    pub fn reference(kind: BackboneKind, widths: [usize; 3], size: usize, num_classes: usize) -> Result<Self> {
        Ok(Self {
            backbone: backbone(kind, widths, size, num_classes)?,
            input_shape: [3, size, size],
            num_classes,
            exit_fractions: DEFAULT_EXIT_FRACTIONS.to_vec(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InternalExit<T> {
    pub attach_index: usize,
    pub head: ExitHead<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiExitModel<T> {
    pub backbone: Sequential<T>,
    pub exits: Vec<InternalExit<T>>,
    /// Cumulative compute fraction per exit, final exit last at exactly 1.0.
    pub cost_table: Vec<f64>,
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    /// Applied to raw `[0, 1]` inputs inside every forward pass.
    pub input_norm: Option<Normalization>,
}

/// Per-exit outputs of one forward pass, in exit order.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitOutputs<T> {
    /// `[N, K]` per exit.
    pub logits: Vec<Tensor<T>>,
    /// `[N, D_i]` pooled features feeding each exit's linear classifier.
    pub reprs: Vec<Tensor<T>>,
    pub costs: Vec<f64>,
}

pub struct ModelCache<T> {
    layers: Vec<Cache<T>>,
    heads: Vec<HeadCache<T>>,
}

impl<T> ModelCache<T> {
    pub fn layer_caches(&self) -> &[Cache<T>] {
        &self.layers
    }
}

fn feature_shape(shape: &[usize]) -> Result<[usize; 3]> {
    match shape {
        [c, h, w] => Ok([*c, *h, *w]),
        s => Err(Error::InvalidModel(format!(
            "exit attach point must produce a feature map, got shape {s:?}"
        ))),
    }
}

impl<T: Real> MultiExitModel<T> {
    /// Initialise a model from its spec. Backbone and each head draw from
    /// separate named seed streams.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        let attach = place_exits(&spec.backbone, &spec.input_shape, &spec.exit_fractions)?;
        let mut rng = seed::rng(seed, &["backbone".into()]);
        let net = Sequential::from_specs(&spec.backbone, &mut rng);
        Self::assemble(net, &attach, spec.input_shape, spec.num_classes, |i| {
            seed::rng(seed, &["head".into(), i.into()])
        })
    }

    /// Attach freshly initialised heads to an existing backbone.
    pub fn assemble<R: Rng>(
        backbone: Sequential<T>,
        attach: &[usize],
        input_shape: [usize; 3],
        num_classes: usize,
        mut head_rng: impl FnMut(usize) -> R,
    ) -> Result<Self> {
        let specs = backbone.specs();
        let prof = profile(&specs, &input_shape)?;
        if prof.output_shapes.last() != Some(&vec![num_classes]) {
            return Err(Error::InvalidModel(format!(
                "backbone output {:?} does not match {num_classes} classes",
                prof.output_shapes.last()
            )));
        }
        let eligible = eligible_attach_points(&specs, &input_shape)?;
        for w in attach.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::InvalidModel(
                    "exit attach indices must be strictly increasing".into(),
                ));
            }
        }
        let total = prof.total() as f64;
        let cumulative = prof.cumulative();
        let mut exits = Vec::with_capacity(attach.len());
        let mut cost_table = Vec::with_capacity(attach.len() + 1);
        for &a in attach {
            if !eligible.get(a).copied().unwrap_or(false) {
                return Err(Error::InvalidModel(format!(
                    "layer {a} cannot host an internal exit"
                )));
            }
            let head = ExitHead::new(
                feature_shape(&prof.output_shapes[a])?,
                num_classes,
                &mut head_rng(a),
            );
            cost_table.push((cumulative[a] + head.macs()) as f64 / total);
            exits.push(InternalExit {
                attach_index: a,
                head,
            });
        }
        cost_table.push(1.0);
        let model = Self {
            backbone,
            exits,
            cost_table,
            input_shape,
            num_classes,
            input_norm: None,
        };
        model.check_costs()?;
        Ok(model)
    }

    fn check_costs(&self) -> Result<()> {
        if self.cost_table.len() != self.num_exits() {
            return Err(Error::InvalidModel("cost table length mismatch".into()));
        }
        if self.cost_table.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidModel(format!(
                "cost table must be strictly increasing, got {:?}",
                self.cost_table
            )));
        }
        if self.cost_table.last() != Some(&1.0) {
            return Err(Error::InvalidModel("final exit cost must be 1.0".into()));
        }
        Ok(())
    }

    /// Internal exits plus the final classifier.
    pub fn num_exits(&self) -> usize {
        self.exits.len() + 1
    }

    pub fn attach_indices(&self) -> Vec<usize> {
        self.exits.iter().map(|e| e.attach_index).collect()
    }

    fn normalize(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let [c, h, w] = self.input_shape;
        if x.shape().len() != 4 || x.shape()[1..] != [c, h, w] {
            return Err(Error::shape(
                "model input",
                format!("[N, {c}, {h}, {w}]"),
                x.shape(),
            ));
        }
        let Some(norm) = &self.input_norm else {
            return Ok(x.clone());
        };
        let plane = h * w;
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let ch = (i / plane) % c;
            let m = T::from_f64_lossy(norm.mean[ch] as f64);
            let s = T::from_f64_lossy(norm.std[ch] as f64);
            *v = (*v - m) / s;
        }
        Ok(out)
    }

    fn final_repr_layer(&self) -> usize {
        self.backbone.layers.len() - 1
    }

    /// Eval-mode pass through every exit.
    pub fn forward_all_exits(&self, x: &Tensor<T>) -> Result<ExitOutputs<T>> {
        let mut cur = self.normalize(x)?;
        let mut logits = Vec::with_capacity(self.num_exits());
        let mut reprs = Vec::with_capacity(self.num_exits());
        let mut next = self.exits.iter().peekable();
        let last = self.final_repr_layer();
        for (i, layer) in self.backbone.layers.iter().enumerate() {
            if i == last {
                reprs.push(cur.clone());
            }
            cur = layer.forward_eval(&cur).map_err(|e| at_layer(i, e))?;
            if let Some(exit) = next.next_if(|e| e.attach_index == i) {
                let (l, r, _) = exit.head.forward(&cur)?;
                logits.push(l);
                reprs.push(r);
            }
        }
        logits.push(cur);
        Ok(ExitOutputs {
            logits,
            reprs,
            costs: self.cost_table.clone(),
        })
    }

    /// Final-exit logits from the plain backbone.
    pub fn forward_backbone(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.backbone.forward_eval(&self.normalize(x)?)
    }

    /// Train-mode pass: batch statistics in every batch-norm layer (running
    /// statistics are updated) and caches for [`backward`](Self::backward).
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(ExitOutputs<T>, ModelCache<T>)> {
        let mut cur = self.normalize(x)?;
        let n_exits = self.num_exits();
        let last = self.final_repr_layer();
        let mut logits = Vec::with_capacity(n_exits);
        let mut reprs = Vec::with_capacity(n_exits);
        let mut caches = Vec::with_capacity(self.backbone.layers.len());
        let mut heads = Vec::with_capacity(self.exits.len());
        let mut next = self.exits.iter().peekable();
        for (i, layer) in self.backbone.layers.iter_mut().enumerate() {
            if i == last {
                reprs.push(cur.clone());
            }
            let (y, c) = layer.forward_train(&cur).map_err(|e| at_layer(i, e))?;
            caches.push(c);
            cur = y;
            if let Some(exit) = next.next_if(|e| e.attach_index == i) {
                let (l, r, hc) = exit.head.forward(&cur)?;
                logits.push(l);
                reprs.push(r);
                heads.push(hc);
            }
        }
        logits.push(cur);
        Ok((
            ExitOutputs {
                logits,
                reprs,
                costs: self.cost_table.clone(),
            },
            ModelCache {
                layers: caches,
                heads,
            },
        ))
    }

    /// Backpropagate per-exit logit gradients. Returns the gradient with
    /// respect to the normalised input and parameter gradients aligned with
    /// [`params`](Self::params).
    pub fn backward(
        &self,
        cache: &ModelCache<T>,
        grad_logits: &[Tensor<T>],
    ) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        if grad_logits.len() != self.num_exits() {
            return Err(Error::shape(
                "backward exit gradients",
                self.num_exits(),
                grad_logits.len(),
            ));
        }
        if cache.layers.len() != self.backbone.layers.len() || cache.heads.len() != self.exits.len() {
            return Err(Error::MissingCache {
                layer: "multi-exit model".into(),
            });
        }
        let mut head_grads = Vec::with_capacity(self.exits.len());
        let mut head_dx: Vec<Option<Tensor<T>>> = vec![None; self.backbone.layers.len()];
        for (k, exit) in self.exits.iter().enumerate() {
            let (dx, g) = exit.head.backward(&cache.heads[k], &grad_logits[k])?;
            head_dx[exit.attach_index] = Some(dx);
            head_grads.push(g);
        }
        let mut g = grad_logits[self.exits.len()].clone();
        let mut per_layer = Vec::with_capacity(self.backbone.layers.len());
        for (i, layer) in self.backbone.layers.iter().enumerate().rev() {
            if let Some(dx) = &head_dx[i] {
                g.add_assign(dx)?;
            }
            let (dx, pg) = layer
                .backward(Some(&cache.layers[i]), &g)
                .map_err(|e| at_layer(i, e))?;
            per_layer.push(pg);
            g = dx;
        }
        per_layer.reverse();
        let mut grads: Vec<Tensor<T>> = per_layer.into_iter().flatten().collect();
        grads.extend(head_grads.into_iter().flatten());
        Ok((g, grads))
    }

    /// Backbone parameters in layer order, then `[mixing, weight, bias]` per
    /// head.
    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut p = self.backbone.params();
        for e in &self.exits {
            p.extend(e.head.params());
        }
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut p = self.backbone.params_mut();
        for e in &mut self.exits {
            p.extend(e.head.params_mut());
        }
        p
    }

    pub fn batchnorms(&self) -> Vec<&BatchNorm2d<T>> {
        self.backbone
            .layers
            .iter()
            .flat_map(Layer::batchnorms)
            .collect()
    }

    pub fn batchnorms_mut(&mut self) -> Vec<&mut BatchNorm2d<T>> {
        self.backbone
            .layers
            .iter_mut()
            .flat_map(Layer::batchnorms_mut)
            .collect()
    }

    pub fn cast<U: Real>(&self) -> MultiExitModel<U> {
        MultiExitModel {
            backbone: self.backbone.cast(),
            exits: self
                .exits
                .iter()
                .map(|e| InternalExit {
                    attach_index: e.attach_index,
                    head: e.head.cast(),
                })
                .collect(),
            cost_table: self.cost_table.clone(),
            input_shape: self.input_shape,
            num_classes: self.num_classes,
            input_norm: self.input_norm.clone(),
        }
    }
}

fn at_layer(index: usize, err: Error) -> Error {
    match err {
        Error::Shape {
            context,
            expected,
            actual,
        } => Error::Shape {
            context: format!("layer {index}: {context}"),
            expected,
            actual,
        },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> ModelSpec {
        ModelSpec::reference(BackboneKind::Convnet8, [4, 6, 8], 16, 5).unwrap()
    }

    #[test]
    fn cost_table_is_increasing_and_ends_at_one() {
        let m = MultiExitModel::<f32>::build(&small_spec(), 3).unwrap();
        assert_eq!(m.num_exits(), m.cost_table.len());
        assert_eq!(*m.cost_table.last().unwrap(), 1.0);
        assert!(m.cost_table.windows(2).all(|w| w[0] < w[1]));
        assert!(m.cost_table[0] > 0.0);
    }

    #[test]
    fn forward_shapes_and_final_exit_matches_backbone() {
        let m = MultiExitModel::<f32>::build(&small_spec(), 3).unwrap();
        let x = Tensor::from_fn(&[2, 3, 16, 16], |i| ((i * 7) % 13) as f32 / 13.0);
        let out = m.forward_all_exits(&x).unwrap();
        assert_eq!(out.logits.len(), m.num_exits());
        assert_eq!(out.reprs.len(), m.num_exits());
        for (k, e) in m.exits.iter().enumerate() {
            assert_eq!(out.reprs[k].shape(), &[2, e.head.feature_dim()]);
            assert_eq!(out.logits[k].shape(), &[2, 5]);
        }
        assert_eq!(out.reprs.last().unwrap().shape(), &[2, 8 * 2 * 2]);
        let plain = m.forward_backbone(&x).unwrap();
        assert_eq!(out.logits.last().unwrap(), &plain);
        assert_eq!(m.forward_all_exits(&x).unwrap(), out);
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let m = MultiExitModel::<f32>::build(&small_spec(), 3).unwrap();
        let x = Tensor::zeros(&[1, 3, 8, 8]);
        assert!(matches!(m.forward_all_exits(&x), Err(Error::Shape { .. })));
    }

    #[test]
    fn params_and_grads_align() {
        let mut m = MultiExitModel::<f64>::build(&small_spec(), 5).unwrap();
        let x = Tensor::from_fn(&[2, 3, 16, 16], |i| ((i * 5) % 11) as f64 / 11.0);
        let (out, cache) = m.forward_train(&x).unwrap();
        let grads: Vec<_> = out.logits.iter().map(|l| Tensor::filled(l.shape(), 0.1)).collect();
        let (dx, pg) = m.backward(&cache, &grads).unwrap();
        assert_eq!(dx.shape(), x.shape());
        let shapes: Vec<_> = m.params().iter().map(|p| p.shape().to_vec()).collect();
        let gshapes: Vec<_> = pg.iter().map(|p| p.shape().to_vec()).collect();
        assert_eq!(shapes, gshapes);
    }
}
