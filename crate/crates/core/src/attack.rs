//! Stage 2: the perturbation generator, the epsilon-bounded image attack,
//! per-attribute semantic triplet losses, the surrogate triplet loss and
//! the attack training loop.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{mean_scalars, sum_scalars, Tape, Var};
use crate::encoders::VisualEncoder;
use crate::error::{Error, Result};
use crate::inversion::{pk_batches, InversionNetworks, PseudoTokenSet};
use crate::nn::{Adam, Conv2d};
use crate::scalar::Scalar;
use crate::tensor::{named_checksum, Tensor};

/// Distance used when picking the least similar negative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMetric {
    L2,
    Cosine,
}

/// Frozen feature extractor interface for surrogate and victim models.
pub trait SurrogateModel<A: Scalar> {
    fn name(&self) -> &str;
    /// Deterministic feature of an image.
    fn extract(&self, image: &Tensor<A>) -> Result<Tensor<A>>;
    /// Differentiable feature of an image var.
    fn extract_var<'t>(&self, tape: &'t Tape<A>, image: Var<'t, A>) -> Var<'t, A>;
    /// Weight checksum for the freeze contract.
    fn checksum(&self) -> [u8; 32];
}

/// A joint-space visual encoder used directly as a retrieval model.
pub struct VisualSurrogate<A: Scalar> {
    pub encoder: VisualEncoder<A>,
    pub label: String,
}

impl<A: Scalar> SurrogateModel<A> for VisualSurrogate<A> {
    fn name(&self) -> &str {
        &self.label
    }

    fn extract(&self, image: &Tensor<A>) -> Result<Tensor<A>> {
        self.encoder.encode_image(image)
    }

    fn extract_var<'t>(&self, tape: &'t Tape<A>, image: Var<'t, A>) -> Var<'t, A> {
        self.encoder.bind(tape).forward(image)
    }

    fn checksum(&self) -> [u8; 32] {
        let arrays = self.encoder.named_arrays();
        let refs: Vec<(String, &Tensor<A>)> = arrays.iter().map(|(n, t)| (n.clone(), t)).collect();
        named_checksum(&refs)
    }
}

/// Generator layer kinds. The decoder upsamples with nearest-neighbor
/// doubling followed by a convolution.
#[derive(Debug, Clone, PartialEq)]
pub enum GenLayer<A: Scalar> {
    /// Convolution followed by tanh.
    ConvTanh(Conv2d<A>),
    /// Residual block: x + conv2(tanh(conv1(x))).
    Residual(Conv2d<A>, Conv2d<A>),
    /// Nearest-neighbor 2x upsampling.
    Upsample,
}

/// Which reference architecture to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorKind {
    /// 3 downsampling blocks, 4 residual blocks, 3 upsampling blocks.
    Reference,
    /// 1 downsampling block, 1 residual block, 1 upsampling block.
    Tiny,
}

/// Encoder-decoder convolutional perturbation generator. The final tanh
/// bounds the raw output in (-1, 1) before epsilon scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationGenerator<A: Scalar> {
    pub layers: Vec<GenLayer<A>>,
    pub kind: GeneratorKind,
}

impl<A: Scalar> PerturbationGenerator<A> {
    pub fn seeded(seed: u64, kind: GeneratorKind) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let conv = |rng: &mut ChaCha8Rng, i, o, s| Conv2d::seeded(rng, i, o, 3, s, 1);
        let layers = match kind {
            GeneratorKind::Reference => vec![
                GenLayer::ConvTanh(conv(&mut rng, 3, 8, 2)),
                GenLayer::ConvTanh(conv(&mut rng, 8, 16, 2)),
                GenLayer::ConvTanh(conv(&mut rng, 16, 32, 2)),
                GenLayer::Residual(conv(&mut rng, 32, 32, 1), conv(&mut rng, 32, 32, 1)),
                GenLayer::Residual(conv(&mut rng, 32, 32, 1), conv(&mut rng, 32, 32, 1)),
                GenLayer::Residual(conv(&mut rng, 32, 32, 1), conv(&mut rng, 32, 32, 1)),
                GenLayer::Residual(conv(&mut rng, 32, 32, 1), conv(&mut rng, 32, 32, 1)),
                GenLayer::Upsample,
                GenLayer::ConvTanh(conv(&mut rng, 32, 16, 1)),
                GenLayer::Upsample,
                GenLayer::ConvTanh(conv(&mut rng, 16, 8, 1)),
                GenLayer::Upsample,
                GenLayer::ConvTanh(conv(&mut rng, 8, 3, 1)),
            ],
            GeneratorKind::Tiny => vec![
                GenLayer::ConvTanh(conv(&mut rng, 3, 4, 2)),
                GenLayer::Residual(conv(&mut rng, 4, 4, 1), conv(&mut rng, 4, 4, 1)),
                GenLayer::Upsample,
                GenLayer::ConvTanh(conv(&mut rng, 4, 3, 1)),
            ],
        };
        Self { layers, kind }
    }

    pub fn bind<'t>(&self, tape: &'t Tape<A>) -> BoundGenerator<'t, A> {
        BoundGenerator {
            layers: self
                .layers
                .iter()
                .map(|l| match l {
                    GenLayer::ConvTanh(c) => BoundGenLayer::ConvTanh(c.bind(tape)),
                    GenLayer::Residual(a, b) => BoundGenLayer::Residual(a.bind(tape), b.bind(tape)),
                    GenLayer::Upsample => BoundGenLayer::Upsample,
                })
                .collect(),
        }
    }

    /// Bounded raw perturbation field G(x) in (-1, 1), same shape as x.
    pub fn raw_field(&self, image: &Tensor<A>) -> Tensor<A> {
        let tape = Tape::new();
        let x = tape.leaf(image.clone());
        self.bind(&tape).forward(x).value()
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor<A>> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            match l {
                GenLayer::ConvTanh(c) => {
                    out.push(&mut c.weight);
                    out.push(&mut c.bias);
                }
                GenLayer::Residual(a, b) => {
                    out.push(&mut a.weight);
                    out.push(&mut a.bias);
                    out.push(&mut b.weight);
                    out.push(&mut b.bias);
                }
                GenLayer::Upsample => {}
            }
        }
        out
    }

    pub fn named_arrays(&self) -> Vec<(String, Tensor<A>)> {
        let mut arrays = Vec::new();
        let mut meta = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            match l {
                GenLayer::ConvTanh(c) => {
                    meta.extend([1.0, c.stride as f64, c.pad as f64]);
                    arrays.push((format!("generator.{i}.conv.weight"), c.weight.clone()));
                    arrays.push((format!("generator.{i}.conv.bias"), c.bias.clone()));
                }
                GenLayer::Residual(a, b) => {
                    meta.extend([2.0, a.stride as f64, a.pad as f64]);
                    arrays.push((format!("generator.{i}.res1.weight"), a.weight.clone()));
                    arrays.push((format!("generator.{i}.res1.bias"), a.bias.clone()));
                    arrays.push((format!("generator.{i}.res2.weight"), b.weight.clone()));
                    arrays.push((format!("generator.{i}.res2.bias"), b.bias.clone()));
                }
                GenLayer::Upsample => meta.extend([3.0, 0.0, 0.0]),
            }
        }
        let kind_code = match self.kind {
            GeneratorKind::Reference => 0.0,
            GeneratorKind::Tiny => 1.0,
        };
        let mut meta_data = vec![kind_code];
        meta_data.extend(meta);
        arrays.insert(
            0,
            (
                "generator.meta".to_string(),
                Tensor::new(vec![meta_data.len()], meta_data.iter().map(|&x| A::from_f64_(x)).collect()),
            ),
        );
        arrays
    }

    pub fn from_arrays(arrays: &[(String, Tensor<A>)]) -> Result<Self> {
        let meta = arrays
            .iter()
            .find(|(n, _)| n == "generator.meta")
            .map(|(_, t)| t.clone())
            .ok_or_else(|| Error::Load("missing array generator.meta".into()))?;
        let m: Vec<f64> = meta.data().iter().map(|x| x.to_f64_()).collect();
        let kind = if m[0] == 0.0 {
            GeneratorKind::Reference
        } else {
            GeneratorKind::Tiny
        };
        let get = |name: String| -> Result<Tensor<A>> {
            arrays
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Load(format!("missing array {name}")))
        };
        let mut layers = Vec::new();
        for (i, chunk) in m[1..].chunks(3).enumerate() {
            let (code, stride, pad) = (chunk[0], chunk[1] as usize, chunk[2] as usize);
            let conv = |w: Tensor<A>, b: Tensor<A>| Conv2d { weight: w, bias: b, stride, pad };
            match code as usize {
                1 => layers.push(GenLayer::ConvTanh(conv(
                    get(format!("generator.{i}.conv.weight"))?,
                    get(format!("generator.{i}.conv.bias"))?,
                ))),
                2 => layers.push(GenLayer::Residual(
                    conv(
                        get(format!("generator.{i}.res1.weight"))?,
                        get(format!("generator.{i}.res1.bias"))?,
                    ),
                    conv(
                        get(format!("generator.{i}.res2.weight"))?,
                        get(format!("generator.{i}.res2.bias"))?,
                    ),
                )),
                3 => layers.push(GenLayer::Upsample),
                c => return Err(Error::Load(format!("unknown generator layer code {c}"))),
            }
        }
        Ok(Self { layers, kind })
    }

    pub fn checksum(&self) -> [u8; 32] {
        let arrays = self.named_arrays();
        let refs: Vec<(String, &Tensor<A>)> = arrays.iter().map(|(n, t)| (n.clone(), t)).collect();
        named_checksum(&refs)
    }
}

pub enum BoundGenLayer<'t, A: Scalar> {
    ConvTanh(crate::nn::BoundConv2d<'t, A>),
    Residual(crate::nn::BoundConv2d<'t, A>, crate::nn::BoundConv2d<'t, A>),
    Upsample,
}

pub struct BoundGenerator<'t, A: Scalar> {
    layers: Vec<BoundGenLayer<'t, A>>,
}

impl<'t, A: Scalar> BoundGenerator<'t, A> {
    pub fn forward(&self, image: Var<'t, A>) -> Var<'t, A> {
        let mut x = image;
        for l in &self.layers {
            x = match l {
                BoundGenLayer::ConvTanh(c) => c.forward(x).tanh(),
                BoundGenLayer::Residual(a, b) => x.add(b.forward(a.forward(x).tanh())),
                BoundGenLayer::Upsample => x.upsample2x(),
            };
        }
        x
    }

    pub fn param_vars(&self) -> Vec<Var<'t, A>> {
        let mut out = Vec::new();
        for l in &self.layers {
            match l {
                BoundGenLayer::ConvTanh(c) => out.extend([c.weight, c.bias]),
                BoundGenLayer::Residual(a, b) => {
                    out.extend([a.weight, a.bias, b.weight, b.bias])
                }
                BoundGenLayer::Upsample => {}
            }
        }
        out
    }
}

/// x' = clip(x + eps * G(x), 0, 1); the L-infinity bound holds by
/// construction since G's output is tanh-bounded.
pub fn apply_perturbation<A: Scalar>(
    gen: &PerturbationGenerator<A>,
    x: &Tensor<A>,
    epsilon: A,
) -> Result<Tensor<A>> {
    if x.data().iter().any(|&p| p < A::zero() || p > A::one()) {
        return Err(Error::Input("image pixels must lie in [0,1]".into()));
    }
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    Ok(apply_perturbation_var(&gen.bind(&tape), xv, epsilon).value())
}

/// Tape variant of [`apply_perturbation`].
pub fn apply_perturbation_var<'t, A: Scalar>(
    gen: &BoundGenerator<'t, A>,
    x: Var<'t, A>,
    epsilon: A,
) -> Var<'t, A> {
    let delta = gen.forward(x).scale(epsilon);
    x.add(delta).clamp(A::zero(), A::one())
}

/// Index of the least similar different-identity batch member per anchor,
/// measured between clean representations. Ties break to the lowest index.
pub fn hardest_negative<A: Scalar>(
    anchors: &[Tensor<A>],
    pids: &[u32],
    metric: DistanceMetric,
) -> Result<Vec<usize>> {
    let n = anchors.len();
    if n != pids.len() {
        return Err(Error::Input("anchor/pid length mismatch".into()));
    }
    let mut out = Vec::with_capacity(n);
    for a in 0..n {
        let mut best: Option<(usize, A)> = None;
        for b in 0..n {
            if pids[b] == pids[a] {
                continue;
            }
            // dissimilarity: L2 distance, or negative cosine
            let d = match metric {
                DistanceMetric::L2 => anchors[a].l2_distance(&anchors[b]),
                DistanceMetric::Cosine => -anchors[a].cosine(&anchors[b]),
            };
            if best.map_or(true, |(_, cur)| d > cur) {
                best = Some((b, d));
            }
        }
        match best {
            Some((b, _)) => out.push(b),
            None => {
                return Err(Error::BatchComposition(format!(
                    "anchor {a} (pid {}) has no different-identity negative",
                    pids[a]
                )))
            }
        }
    }
    Ok(out)
}

/// Per-attribute semantic triplet loss (hinge with margin `alpha`), each
/// attribute space averaged over the batch, summed over attributes.
/// Distances are L2 on raw pseudo-tokens.
pub fn semantic_attack_loss<A: Scalar>(
    clean_tokens: &[PseudoTokenSet<A>],
    adv_tokens: &[PseudoTokenSet<A>],
    pids: &[u32],
    alpha: A,
    metric: DistanceMetric,
) -> Result<A> {
    let tape = Tape::new();
    let adv_vars: Vec<Vec<Var<'_, A>>> = adv_tokens
        .iter()
        .map(|p| p.vectors.iter().map(|v| tape.leaf(v.clone())).collect())
        .collect();
    Ok(
        semantic_attack_loss_var(&tape, clean_tokens, &adv_vars, pids, alpha, metric)?
            .value()
            .item(),
    )
}

/// Tape variant: adversarial pseudo-tokens are vars (indexed
/// `[sample][attribute]`), clean tokens are constants.
pub fn semantic_attack_loss_var<'t, A: Scalar>(
    tape: &'t Tape<A>,
    clean_tokens: &[PseudoTokenSet<A>],
    adv_tokens: &[Vec<Var<'t, A>>],
    pids: &[u32],
    alpha: A,
    metric: DistanceMetric,
) -> Result<Var<'t, A>> {
    let n = clean_tokens.len();
    if n == 0 || adv_tokens.len() != n || pids.len() != n {
        return Err(Error::Input("batch arrays must share a nonzero length".into()));
    }
    let attr_count = clean_tokens[0].vectors.len();
    let mut per_attribute = Vec::with_capacity(attr_count);
    for i in 0..attr_count {
        let clean_i: Vec<Tensor<A>> = clean_tokens
            .iter()
            .map(|p| p.vectors[i].clone())
            .collect();
        let negatives = hardest_negative(&clean_i, pids, metric)?;
        let mut hinges = Vec::with_capacity(n);
        for a in 0..n {
            let adv = adv_tokens[a][i];
            let clean = tape.leaf(clean_i[a].clone());
            let neg = tape.leaf(clean_i[negatives[a]].clone());
            let hinge = adv
                .l2_distance(neg)
                .sub(adv.l2_distance(clean))
                .add_scalar(alpha)
                .relu();
            hinges.push(hinge);
        }
        per_attribute.push(mean_scalars(tape, &hinges));
    }
    Ok(sum_scalars(tape, &per_attribute))
}

/// Surrogate-space triplet loss: same hinge in a single feature space.
pub fn surrogate_attack_loss<A: Scalar>(
    clean_feats: &[Tensor<A>],
    adv_feats: &[Tensor<A>],
    pids: &[u32],
    alpha: A,
    metric: DistanceMetric,
) -> Result<A> {
    let tape = Tape::new();
    let adv_vars: Vec<Var<'_, A>> = adv_feats.iter().map(|v| tape.leaf(v.clone())).collect();
    Ok(
        surrogate_attack_loss_var(&tape, clean_feats, &adv_vars, pids, alpha, metric)?
            .value()
            .item(),
    )
}

/// Tape variant of [`surrogate_attack_loss`].
pub fn surrogate_attack_loss_var<'t, A: Scalar>(
    tape: &'t Tape<A>,
    clean_feats: &[Tensor<A>],
    adv_feats: &[Var<'t, A>],
    pids: &[u32],
    alpha: A,
    metric: DistanceMetric,
) -> Result<Var<'t, A>> {
    let n = clean_feats.len();
    if n == 0 || adv_feats.len() != n || pids.len() != n {
        return Err(Error::Input("batch arrays must share a nonzero length".into()));
    }
    let negatives = hardest_negative(clean_feats, pids, metric)?;
    let mut hinges = Vec::with_capacity(n);
    for a in 0..n {
        let adv = adv_feats[a];
        let clean = tape.leaf(clean_feats[a].clone());
        let neg = tape.leaf(clean_feats[negatives[a]].clone());
        hinges.push(
            adv.l2_distance(neg)
                .sub(adv.l2_distance(clean))
                .add_scalar(alpha)
                .relu(),
        );
    }
    Ok(mean_scalars(tape, &hinges))
}

/// Total objective: unweighted sum, with an optional weighting knob.
pub fn total_loss<A: Scalar>(l_m: A, l_s: A) -> A {
    total_loss_weighted(l_m, l_s, A::one())
}

pub fn total_loss_weighted<A: Scalar>(l_m: A, l_s: A, semantic_weight: A) -> A {
    l_m + semantic_weight * l_s
}

/// Stage-2 training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Per-pixel L-infinity bound.
    pub epsilon: f64,
    /// Triplet margin.
    pub alpha: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub p: usize,
    pub k: usize,
    pub metric: DistanceMetric,
    pub seed: u64,
    pub generator: GeneratorKind,
    /// Weight on the semantic term (1 = the unweighted sum).
    pub semantic_weight: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 8.0 / 255.0,
            alpha: 0.3,
            learning_rate: 1e-3,
            epochs: 10,
            p: 4,
            k: 2,
            metric: DistanceMetric::L2,
            seed: 0,
            generator: GeneratorKind::Reference,
            semantic_weight: 1.0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Config("epsilon must lie in (0, 1)".into()));
        }
        if self.alpha < 0.0 {
            return Err(Error::Config("alpha must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Per-epoch stage-2 log entry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackLogEntry {
    pub epoch: usize,
    pub l_m: f64,
    pub l_s: f64,
    pub total: f64,
}

/// Train the perturbation generator (stage 2). Encoders, inversion nets
/// and the surrogate stay frozen.
pub fn train_attack<A: Scalar>(
    images: &[Tensor<A>],
    pids: &[u32],
    visual: &VisualEncoder<A>,
    nets: &InversionNetworks<A>,
    surrogate: &dyn SurrogateModel<A>,
    gen: &mut PerturbationGenerator<A>,
    cfg: &AttackConfig,
) -> Result<Vec<AttackLogEntry>> {
    cfg.validate()?;
    if images.len() != pids.len() || images.len() < 2 {
        return Err(Error::Input("need at least two labelled images".into()));
    }
    let eps = A::from_f64_(cfg.epsilon);
    let alpha = A::from_f64_(cfg.alpha);
    let sw = A::from_f64_(cfg.semantic_weight);

    // Clean representations are constants for the generator objective.
    let clean_feats: Vec<Tensor<A>> = images
        .iter()
        .map(|x| surrogate.extract(x))
        .collect::<Result<_>>()?;
    let clean_tokens: Vec<PseudoTokenSet<A>> = images
        .iter()
        .map(|x| nets.invert(&visual.encode_image(x)?))
        .collect::<Result<_>>()?;

    let mut opt: Adam<A> = Adam::new(A::from_f64_(cfg.learning_rate));
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng =
            ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9e3779b97f4a7c15));
        let batches = pk_batches(pids, cfg.p, cfg.k, &mut rng);
        let (mut sum_m, mut sum_s, mut count) = (0.0f64, 0.0f64, 0usize);
        for (bi, batch) in batches.iter().enumerate() {
            let tape = Tape::new();
            let bound_gen = gen.bind(&tape);
            let bound_visual = visual.bind(&tape);
            let bound_nets = nets.bind(&tape);
            let mut adv_feats = Vec::with_capacity(batch.len());
            let mut adv_tokens = Vec::with_capacity(batch.len());
            let mut batch_clean_feats = Vec::with_capacity(batch.len());
            let mut batch_clean_tokens = Vec::with_capacity(batch.len());
            let mut batch_pids = Vec::with_capacity(batch.len());
            for &idx in batch {
                let x = tape.leaf(images[idx].clone());
                let x_adv = apply_perturbation_var(&bound_gen, x, eps);
                adv_feats.push(surrogate.extract_var(&tape, x_adv));
                let v_adv = bound_visual.forward(x_adv);
                adv_tokens.push(bound_nets.forward(v_adv));
                batch_clean_feats.push(clean_feats[idx].clone());
                batch_clean_tokens.push(clean_tokens[idx].clone());
                batch_pids.push(pids[idx]);
            }
            let l_m = surrogate_attack_loss_var(
                &tape,
                &batch_clean_feats,
                &adv_feats,
                &batch_pids,
                alpha,
                cfg.metric,
            )?;
            let l_s = semantic_attack_loss_var(
                &tape,
                &batch_clean_tokens,
                &adv_tokens,
                &batch_pids,
                alpha,
                cfg.metric,
            )?;
            let total = l_m.add(l_s.scale(sw));
            let (tv, mv, sv) = (
                total.value().item().to_f64_(),
                l_m.value().item().to_f64_(),
                l_s.value().item().to_f64_(),
            );
            if !tv.is_finite() {
                return Err(Error::NonFinite(format!(
                    "epoch {epoch} batch {bi}: total={tv} l_m={mv} l_s={sv}"
                )));
            }
            let grads = tape.backward(total);
            let grad_tensors: Vec<Tensor<A>> = bound_gen
                .param_vars()
                .iter()
                .map(|p| grads.get_or_zeros(*p))
                .collect();
            let mut params = gen.param_tensors_mut();
            opt.step(&mut params, &grad_tensors);
            sum_m += mv;
            sum_s += sv;
            count += 1;
        }
        let denom = count.max(1) as f64;
        log.push(AttackLogEntry {
            epoch,
            l_m: sum_m / denom,
            l_s: sum_s / denom,
            total: (sum_m + sum_s) / denom,
        });
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::uniform_tensor;

    fn rand_vecs(n: usize, d: usize, seed: u64) -> Vec<Tensor<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| uniform_tensor(&mut rng, &[d], 1.0)).collect()
    }

    #[test]
    fn two_sample_batch_picks_each_other() {
        let anchors = rand_vecs(2, 4, 0);
        let idx = hardest_negative(&anchors, &[0, 1], DistanceMetric::L2).unwrap();
        assert_eq!(idx, vec![1, 0]);
    }

    #[test]
    fn argmax_distance_negative_selection() {
        let anchors = vec![
            Tensor::zeros(&[2]),
            Tensor::new(vec![2], vec![1.0, 0.0]),
            Tensor::new(vec![2], vec![2.0, 0.0]),
            Tensor::new(vec![2], vec![3.0, 0.0]),
        ];
        let idx = hardest_negative(&anchors, &[0, 1, 2, 3], DistanceMetric::L2).unwrap();
        assert_eq!(idx[0], 3);
    }

    #[test]
    fn hardest_negative_matches_brute_force() {
        let anchors = rand_vecs(8, 5, 42);
        let pids = vec![0, 0, 1, 1, 2, 2, 3, 3];
        let got = hardest_negative(&anchors, &pids, DistanceMetric::L2).unwrap();
        for a in 0..8 {
            let mut best = None;
            let mut best_d = f64::NEG_INFINITY;
            for b in 0..8 {
                if pids[b] == pids[a] {
                    continue;
                }
                let d = anchors[a].l2_distance(&anchors[b]);
                if d > best_d {
                    best_d = d;
                    best = Some(b);
                }
            }
            assert_eq!(got[a], best.unwrap());
        }
    }

    #[test]
    fn no_valid_negative_is_an_error() {
        let anchors = rand_vecs(3, 2, 1);
        let err = hardest_negative(&anchors, &[5, 5, 5], DistanceMetric::L2).unwrap_err();
        assert!(matches!(err, Error::BatchComposition(_)));
    }

    #[test]
    fn unmoved_adversary_hinge_is_distance_plus_margin() {
        // S' = S, two samples at L2 distance 1 with distinct pids.
        let s0 = Tensor::new(vec![2], vec![0.0, 0.0]);
        let s1 = Tensor::new(vec![2], vec![1.0, 0.0]);
        let clean = vec![
            PseudoTokenSet { vectors: vec![s0.clone()] },
            PseudoTokenSet { vectors: vec![s1.clone()] },
        ];
        let loss: f64 =
            semantic_attack_loss(&clean, &clean, &[0, 1], 0.3, DistanceMetric::L2).unwrap();
        assert!((loss - 1.3).abs() < 1e-12, "{loss}");
    }

    #[test]
    fn satisfied_hinge_is_zero() {
        // m' = m^n with ||m' - m|| = 2.0 > alpha.
        let m0 = Tensor::new(vec![2], vec![0.0, 0.0]);
        let m1 = Tensor::new(vec![2], vec![2.0, 0.0]);
        let clean = vec![m0.clone(), m1.clone()];
        let adv = vec![m1.clone(), m0.clone()];
        let loss: f64 =
            surrogate_attack_loss(&clean, &adv, &[0, 1], 0.3, DistanceMetric::L2).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn triplet_losses_are_translation_invariant() {
        let clean = rand_vecs(6, 4, 7);
        let adv = rand_vecs(6, 4, 8);
        let pids = vec![0, 0, 1, 1, 2, 2];
        let a = surrogate_attack_loss(&clean, &adv, &pids, 0.3, DistanceMetric::L2).unwrap();
        let shift = Tensor::new(vec![4], vec![5.0, -3.0, 2.0, 0.5]);
        let clean_s: Vec<_> = clean.iter().map(|v| v.add(&shift)).collect();
        let adv_s: Vec<_> = adv.iter().map(|v| v.add(&shift)).collect();
        let b = surrogate_attack_loss(&clean_s, &adv_s, &pids, 0.3, DistanceMetric::L2).unwrap();
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }

    #[test]
    fn zero_generator_output_is_identity() {
        let mut gen: PerturbationGenerator<f64> =
            PerturbationGenerator::seeded(0, GeneratorKind::Tiny);
        // Zero the head conv so G(x) = 0.
        if let Some(GenLayer::ConvTanh(c)) = gen.layers.last_mut() {
            c.weight = Tensor::zeros(c.weight.shape());
            c.bias = Tensor::zeros(c.bias.shape());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Tensor<f64> =
            crate::nn::uniform_tensor::<f64>(&mut rng, &[3, 16, 16], 0.5).map(|p| p.abs());
        let x_adv = apply_perturbation(&gen, &x, 8.0 / 255.0).unwrap();
        for (a, b) in x.data().iter().zip(x_adv.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn saturated_generator_respects_bound_and_clipping() {
        // Emulate G(x) ~= +1 everywhere by a huge positive head bias.
        let mut gen: PerturbationGenerator<f64> =
            PerturbationGenerator::seeded(0, GeneratorKind::Tiny);
        if let Some(GenLayer::ConvTanh(c)) = gen.layers.last_mut() {
            c.weight = Tensor::zeros(c.weight.shape());
            c.bias = Tensor::full(c.bias.shape(), 50.0);
        }
        let eps = 8.0 / 255.0;
        let mut x = Tensor::zeros(&[3, 16, 16]);
        x.data_mut()[0] = 0.999; // near the top of the range: clipped
        let x_adv = apply_perturbation(&gen, &x, eps).unwrap();
        assert!((x_adv.data()[0] - 1.0).abs() < 1e-12);
        for i in 1..x.len() {
            assert!((x_adv.data()[i] - (x.data()[i] + eps)).abs() < 1e-9);
        }
    }

    #[test]
    fn epsilon_bound_holds_for_random_generator() {
        let gen: PerturbationGenerator<f64> = PerturbationGenerator::seeded(9, GeneratorKind::Tiny);
        let eps = 8.0 / 255.0;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let x: Tensor<f64> =
                crate::nn::uniform_tensor::<f64>(&mut rng, &[3, 16, 16], 0.5).map(|p| p.abs());
            let x_adv = apply_perturbation(&gen, &x, eps).unwrap();
            for (a, b) in x.data().iter().zip(x_adv.data()) {
                assert!((a - b).abs() <= eps + 1e-7);
                assert!(*b >= 0.0 && *b <= 1.0);
            }
        }
    }

    #[test]
    fn generator_roundtrips_through_named_arrays() {
        let gen: PerturbationGenerator<f64> = PerturbationGenerator::seeded(4, GeneratorKind::Tiny);
        let arrays = gen.named_arrays();
        let back = PerturbationGenerator::from_arrays(&arrays).unwrap();
        assert_eq!(gen, back);
    }

    #[test]
    fn total_loss_is_exact_sum() {
        assert_eq!(total_loss(1.0, 2.0), 3.0);
        assert_eq!(total_loss(0.0, 0.0), 0.0);
        assert_eq!(total_loss(0.25, -0.5), -0.25);
    }
}
