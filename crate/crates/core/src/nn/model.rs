use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::attention::{self, AttentionCache, AttentionState, RegionAttention, RegionSqueeze, SqueezeCache};
use super::backbone::BackboneConfig;
use super::graph::{self, AggregateFeature, GcnCache, RegionGraph, RelationReasoning};
use super::layers::{Linear, Stream, StreamCache};
use super::tensor::{FeatureMap, Tensor};
use super::NnError;
use crate::dataset::NUM_CLASSES;
use crate::flow::{FlowStats, RegionStack, REGIONS};
use crate::image::Plane;
use crate::loss::{self, LossComponents, LossWeights};
use crate::seed;

/// Everything needed to rebuild a model's parameter shapes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Reduction ratio of the attention perceptron's hidden layer.
    pub attention_reduction: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            attention_reduction: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        self.backbone.validate()?;
        if self.attention_reduction == 0 || self.attention_reduction > REGIONS {
            return Err(NnError::InvalidConfig(format!(
                "attention reduction {} outside 1..={REGIONS}",
                self.attention_reduction
            )));
        }
        Ok(())
    }
}

/// Main classifier over `f_a` and the region classifier shared by all `f_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct Heads {
    pub main: Linear,
    pub region: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RrrnModel {
    pub config: ModelConfig,
    pub vertical: Stream,
    pub horizontal: Stream,
    pub squeeze: Vec<RegionSqueeze>,
    pub attention: RegionAttention,
    pub relation: RelationReasoning,
    pub heads: Heads,
    /// Input standardization fitted on the training flows. Not trained by
    /// gradient descent.
    pub normalizer: FlowStats,
}

/// Result of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub logits: Vec<f64>,
    pub region_logits: Vec<Vec<f64>>,
    pub attention: AttentionState,
    pub graph: RegionGraph,
    pub aggregate: AggregateFeature,
}

impl ForwardOutput {
    pub fn alpha(&self) -> &[f64] {
        &self.attention.alpha
    }

    pub fn predicted_class(&self) -> usize {
        argmax(&self.logits)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &x)| if x > acc.1 { (i, x) } else { acc })
        .0
}

/// Per-sample loss terms together with what the forward pass predicted.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleLoss {
    pub components: LossComponents,
    pub logits: Vec<f64>,
    pub alpha: Vec<f64>,
}

struct ForwardCache {
    vertical: Vec<StreamCache>,
    horizontal: Vec<StreamCache>,
    maps: Vec<FeatureMap>,
    squeeze: Vec<SqueezeCache>,
    attention: AttentionCache,
    means: Vec<Vec<f64>>,
    gcn: GcnCache,
}

fn plane_map(p: &Plane) -> FeatureMap {
    FeatureMap::from_vec(1, p.height(), p.width(), p.data().to_vec())
}

impl RrrnModel {
    /// Fresh parameters drawn from the `"init"` stream of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, NnError> {
        let mut rng = seed::rng_for(seed, "init");
        Self::with_rng(config, true, &mut rng)
    }

    /// `zero_attention_output` zeroes the attention perceptron's last layer so
    /// every region weight starts at 0.5.
    pub fn with_rng<R: Rng + ?Sized>(config: ModelConfig, zero_attention_output: bool, rng: &mut R) -> Result<Self, NnError> {
        config.validate()?;
        let c = config.backbone.channels();
        let vertical = config.backbone.build_stream(rng);
        let horizontal = config.backbone.build_stream(rng);
        let squeeze = (0..REGIONS).map(|_| RegionSqueeze::new(c, rng)).collect();
        let attention = RegionAttention::new(REGIONS, config.attention_reduction, zero_attention_output, rng);
        let relation = RelationReasoning::new(c, rng);
        let heads = Heads {
            main: Linear::new(2 * c, NUM_CLASSES, rng),
            region: Linear::new(c, NUM_CLASSES, rng),
        };
        Ok(Self {
            config,
            vertical,
            horizontal,
            squeeze,
            attention,
            relation,
            heads,
            normalizer: FlowStats::IDENTITY,
        })
    }

    pub fn channels(&self) -> usize {
        self.config.backbone.channels()
    }

    /// A same-shaped model with every parameter zero, used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config,
            vertical: self.vertical.zeros_like(),
            horizontal: self.horizontal.zeros_like(),
            squeeze: self.squeeze.iter().map(RegionSqueeze::zeros_like).collect(),
            attention: self.attention.zeros_like(),
            relation: self.relation.zeros_like(),
            heads: Heads {
                main: self.heads.main.zeros_like(),
                region: self.heads.region.zeros_like(),
            },
            normalizer: FlowStats::IDENTITY,
        }
    }

    /// All trainable tensors with stable dotted names.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        fn push<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: &str, items: Vec<(String, &'a Tensor)>) {
            out.extend(items.into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)));
        }
        push(&mut out, "vertical", self.vertical.tensors());
        push(&mut out, "horizontal", self.horizontal.tensors());
        for (k, sq) in self.squeeze.iter().enumerate() {
            push(&mut out, &format!("squeeze.{k}.f1"), sq.f1.tensors());
            push(&mut out, &format!("squeeze.{k}.f2"), sq.f2.tensors());
        }
        push(&mut out, "attention.w0", self.attention.w0.tensors());
        push(&mut out, "attention.w1", self.attention.w1.tensors());
        push(&mut out, "relation", vec![("w0".into(), &self.relation.w0), ("w1".into(), &self.relation.w1)]);
        push(&mut out, "heads.main", self.heads.main.tensors());
        push(&mut out, "heads.region", self.heads.region.tensors());
        out
    }

    /// Mutable views in the same order as [`Self::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.vertical.tensors_mut();
        out.extend(self.horizontal.tensors_mut());
        for sq in &mut self.squeeze {
            out.extend(sq.f1.tensors_mut());
            out.extend(sq.f2.tensors_mut());
        }
        out.extend(self.attention.w0.tensors_mut());
        out.extend(self.attention.w1.tensors_mut());
        out.push(&mut self.relation.w0);
        out.push(&mut self.relation.w1);
        out.extend(self.heads.main.tensors_mut());
        out.extend(self.heads.region.tensors_mut());
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Copies a named tensor in, checking its shape.
    pub fn set_tensor(&mut self, name: &str, shape: &[usize], data: &[f64]) -> Result<(), NnError> {
        let index = self
            .named_tensors()
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| NnError::UnknownTensor(name.into()))?;
        let target = self.tensors_mut().swap_remove(index);
        if target.shape != shape || target.data.len() != data.len() {
            return Err(NnError::ShapeMismatch {
                context: "set_tensor",
                expected: target.data.len(),
                found: data.len(),
            });
        }
        target.data.copy_from_slice(data);
        Ok(())
    }

    fn check_stack(&self, stack: &RegionStack) -> Result<(), NnError> {
        let expected = self.config.backbone.input_size;
        if stack.vertical.len() != REGIONS || stack.horizontal.len() != REGIONS {
            return Err(NnError::ShapeMismatch {
                context: "region count",
                expected: REGIONS,
                found: stack.vertical.len().min(stack.horizontal.len()),
            });
        }
        for p in stack.vertical.iter().chain(&stack.horizontal) {
            if p.width() != expected || p.height() != expected {
                return Err(NnError::ShapeMismatch {
                    context: "region size",
                    expected,
                    found: p.width(),
                });
            }
        }
        Ok(())
    }

    /// `p_k`: per region, the vertical stream's map stacked on the horizontal
    /// stream's map. The stack is used as given, without the normalizer.
    pub fn backbone_forward(&self, stack: &RegionStack) -> Result<Vec<FeatureMap>, NnError> {
        self.check_stack(stack)?;
        Ok((0..REGIONS)
            .map(|k| {
                let v = self.vertical.forward(plane_map(&stack.vertical[k]));
                let h = self.horizontal.forward(plane_map(&stack.horizontal[k]));
                FeatureMap::concat_channels(&v, &h)
            })
            .collect())
    }

    fn forward_cached(&self, stack: &RegionStack) -> Result<(ForwardOutput, ForwardCache), NnError> {
        self.check_stack(stack)?;
        let stack = self.normalizer.apply(stack);
        let mut vertical = Vec::with_capacity(REGIONS);
        let mut horizontal = Vec::with_capacity(REGIONS);
        let mut maps = Vec::with_capacity(REGIONS);
        for k in 0..REGIONS {
            let (v, vc) = self.vertical.forward_cached(plane_map(&stack.vertical[k]));
            let (h, hc) = self.horizontal.forward_cached(plane_map(&stack.horizontal[k]));
            vertical.push(vc);
            horizontal.push(hc);
            maps.push(FeatureMap::concat_channels(&v, &h));
        }

        let mut squeezed = Vec::with_capacity(REGIONS);
        let mut squeeze = Vec::with_capacity(REGIONS);
        for (p, sq) in maps.iter().zip(&self.squeeze) {
            let (mu, cache) = attention::squeeze_cached(p, sq);
            squeezed.push(mu);
            squeeze.push(cache);
        }
        let psi = attention::stack_squeezed(&squeezed);
        let (alpha, attention_cache) = attention::attention_cached(&psi, &self.attention);
        let means: Vec<Vec<f64>> = maps.iter().map(FeatureMap::spatial_mean).collect();
        let weighted: Vec<Vec<f64>> = means
            .iter()
            .zip(&alpha)
            .map(|(m, &a)| m.iter().map(|v| a * v).collect())
            .collect();

        let region_graph = graph::build_graph(&weighted);
        let (relational, gcn) = graph::gcn_cached(&weighted, &region_graph, &self.relation.w0, &self.relation.w1);
        let aggregate = graph::aggregate(&weighted, &relational)?;
        let logits = self.heads.main.forward(&aggregate.combined);
        let region_logits = weighted.iter().map(|f| self.heads.region.forward(f)).collect();

        let output = ForwardOutput {
            logits,
            region_logits,
            attention: AttentionState {
                squeezed,
                psi,
                alpha,
                weighted,
            },
            graph: region_graph,
            aggregate,
        };
        let cache = ForwardCache {
            vertical,
            horizontal,
            maps,
            squeeze,
            attention: attention_cache,
            means,
            gcn,
        };
        Ok((output, cache))
    }

    /// Evaluation-mode forward pass; the normalizer is applied first.
    pub fn forward(&self, stack: &RegionStack) -> Result<ForwardOutput, NnError> {
        Ok(self.forward_cached(stack)?.0)
    }

    pub fn forward_batch(&self, stacks: &[RegionStack]) -> Result<Vec<ForwardOutput>, NnError> {
        stacks.iter().map(|s| self.forward(s)).collect()
    }

    /// Loss terms of one sample without touching gradients.
    pub fn sample_loss(&self, stack: &RegionStack, label: usize, weights: &LossWeights) -> Result<SampleLoss, NnError> {
        check_label(label)?;
        let out = self.forward(stack)?;
        let components = sample_components(&out, label, weights)?;
        Ok(SampleLoss {
            components,
            logits: out.logits,
            alpha: out.attention.alpha,
        })
    }

    /// Forward and backward pass for one sample. Parameter gradients of
    /// `scale * total_loss` are added to `grad`.
    pub fn accumulate_gradients(&self, stack: &RegionStack, label: usize, weights: &LossWeights, scale: f64, grad: &mut RrrnModel) -> Result<SampleLoss, NnError> {
        check_label(label)?;
        let (out, cache) = self.forward_cached(stack)?;
        let c = self.channels();
        let n = REGIONS as f64;

        let (cls, ce_grad) = loss::cross_entropy_single(&out.logits, label).map_err(loss_error)?;
        let (rb, rb_grad) = loss::rb_loss_with_grad(&out.attention.alpha, weights.beta);
        let (cor, cor_grad) = loss::cor_loss_with_grad(&out.region_logits, &out.logits, label).map_err(loss_error)?;

        let dlogits: Vec<f64> = ce_grad
            .iter()
            .zip(&cor_grad.logits)
            .map(|(a, b)| scale * (a + weights.lambda2 * b))
            .collect();
        let mut dalpha: Vec<f64> = rb_grad.iter().map(|g| scale * weights.lambda1 * g).collect();

        let weighted = &out.attention.weighted;
        let dcombined = self.heads.main.backward(&out.aggregate.combined, &dlogits, &mut grad.heads.main);
        let mut df: Vec<Vec<f64>> = Vec::with_capacity(REGIONS);
        for (k, f) in weighted.iter().enumerate() {
            let drl: Vec<f64> = cor_grad.region_logits[k]
                .iter()
                .map(|g| scale * weights.lambda2 * g)
                .collect();
            df.push(self.heads.region.backward(f, &drl, &mut grad.heads.region));
        }
        let (d_region, d_relation) = dcombined.split_at(c);
        let mut dp2 = vec![vec![0.0; c]; REGIONS];
        for k in 0..REGIONS {
            for i in 0..c {
                df[k][i] += (d_region[i] + d_relation[i]) / n;
                dp2[k][i] = d_relation[i] / n;
            }
        }
        let (dp0, dtransition) = graph::gcn_backward(&cache.gcn, &dp2, &self.relation, &mut grad.relation);
        for (dk, gk) in df.iter_mut().zip(&dp0) {
            for (a, b) in dk.iter_mut().zip(gk) {
                *a += b;
            }
        }
        graph::graph_backward(&out.graph, &dtransition, &mut df);

        let alpha = &out.attention.alpha;
        for k in 0..REGIONS {
            dalpha[k] += df[k].iter().zip(&cache.means[k]).map(|(a, b)| a * b).sum::<f64>();
        }
        let (hh, ww) = (cache.maps[0].height, cache.maps[0].width);
        let dpsi = attention::attention_backward(&self.attention, &cache.attention, &dalpha, &mut grad.attention, hh, ww);
        let area = (hh * ww) as f64;
        for k in 0..REGIONS {
            let p = &cache.maps[k];
            let dmu = FeatureMap::from_vec(1, hh, ww, dpsi.channel(k).to_vec());
            let mut dp = attention::squeeze_backward(&self.squeeze[k], p, &cache.squeeze[k], &dmu, &mut grad.squeeze[k]);
            let a = p.area();
            for ch in 0..c {
                let g = alpha[k] * df[k][ch] / area;
                dp.data[ch * a..(ch + 1) * a].iter_mut().for_each(|v| *v += g);
            }
            let (dv, dh) = dp.split_channels(self.config.backbone.stream_channels);
            self.vertical.backward(&cache.vertical[k], dv, &mut grad.vertical);
            self.horizontal.backward(&cache.horizontal[k], dh, &mut grad.horizontal);
        }

        Ok(SampleLoss {
            components: LossComponents { cls, rb, cor },
            logits: out.logits,
            alpha: out.attention.alpha,
        })
    }
}

fn check_label(label: usize) -> Result<(), NnError> {
    if label >= NUM_CLASSES {
        return Err(NnError::ShapeMismatch {
            context: "label",
            expected: NUM_CLASSES,
            found: label,
        });
    }
    Ok(())
}

fn loss_error(e: loss::LossError) -> NnError {
    NnError::InvalidConfig(format!("{e}"))
}

fn sample_components(out: &ForwardOutput, label: usize, weights: &LossWeights) -> Result<LossComponents, NnError> {
    Ok(LossComponents {
        cls: loss::cross_entropy_single(&out.logits, label).map_err(loss_error)?.0,
        rb: loss::rb_loss(&out.attention.alpha, weights.beta),
        cor: loss::cor_loss(&out.region_logits, &out.logits, label).map_err(loss_error)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_stack(size: usize, rng: &mut ChaCha8Rng) -> RegionStack {
        let mut plane = || Plane::from_fn(size, size, |_, _| rng.gen_range(-1.0..1.0));
        let vertical = (0..REGIONS).map(|_| plane()).collect();
        let horizontal = (0..REGIONS).map(|_| plane()).collect();
        RegionStack { vertical, horizontal }
    }

    #[test]
    fn zero_stack_gives_zero_maps() {
        let model = RrrnModel::new(ModelConfig::default(), 1).unwrap();
        let maps = model.backbone_forward(&RegionStack::zeros(32)).unwrap();
        assert_eq!(maps.len(), REGIONS);
        for p in &maps {
            assert_eq!((p.channels, p.height, p.width), (16, 4, 4));
            assert!(p.data.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn swapping_streams_swaps_halves() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = RrrnModel::new(ModelConfig::default(), 2).unwrap();
        let mut swapped = model.clone();
        core::mem::swap(&mut swapped.vertical, &mut swapped.horizontal);
        let stack = random_stack(32, &mut rng);
        let flipped = RegionStack {
            vertical: stack.horizontal.clone(),
            horizontal: stack.vertical.clone(),
        };
        let a = model.backbone_forward(&stack).unwrap();
        let b = swapped.backbone_forward(&flipped).unwrap();
        for (pa, pb) in a.iter().zip(&b) {
            let (va, ha) = pa.split_channels(8);
            let (vb, hb) = pb.split_channels(8);
            assert_eq!(va, hb);
            assert_eq!(ha, vb);
        }
    }

    #[test]
    fn initial_attention_is_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = RrrnModel::new(ModelConfig::default(), 3).unwrap();
        let out = model.forward(&random_stack(32, &mut rng)).unwrap();
        assert_eq!(out.alpha(), &[0.5; REGIONS]);
        assert!(out.logits.iter().all(|v| v.is_finite()));
        assert_eq!(out.aggregate.combined.len(), 32);
    }

    #[test]
    fn wrong_input_size_is_rejected() {
        let model = RrrnModel::new(ModelConfig::default(), 3).unwrap();
        assert!(matches!(
            model.forward(&RegionStack::zeros(16)),
            Err(NnError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn named_and_mutable_views_agree() {
        let mut model = RrrnModel::new(ModelConfig::default(), 4).unwrap();
        let shapes: Vec<Vec<usize>> = model.named_tensors().iter().map(|(_, t)| t.shape.clone()).collect();
        let mut_shapes: Vec<Vec<usize>> = model.tensors_mut().iter().map(|t| t.shape.clone()).collect();
        assert_eq!(shapes, mut_shapes);
        let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
        assert!(names.contains(&"relation.w0".into()));
        assert!(names.contains(&"squeeze.5.f2.bias".into()));
        model.set_tensor("heads.main.bias", &[5], &[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(model.heads.main.bias.data, vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        assert!(model.set_tensor("heads.main.bias", &[4], &[0.0; 4]).is_err());
        assert!(model.set_tensor("nope", &[1], &[0.0]).is_err());
    }
}
