//! Attribute inversion networks and their contrastive training (stage 1):
//! maps image features to one pseudo-token per attribute slot.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{mean_scalars, Tape, Var};
use crate::encoders::{TextEncoder, VisualEncoder};
use crate::error::{Error, Result};
use crate::nn::{Adam, BoundLinear, Linear};
use crate::prompt::{inject_pseudo_tokens_var, TokenizedPrompt};
use crate::scalar::Scalar;
use crate::tensor::{named_checksum, Tensor};

/// One pseudo-token vector per attribute slot.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoTokenSet<A: Scalar> {
    pub vectors: Vec<Tensor<A>>,
}

/// Three fully-connected layers per attribute: d -> 2e -> 2e -> e with a
/// smooth nonlinearity between layers and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct InversionNet<A: Scalar> {
    pub l1: Linear<A>,
    pub l2: Linear<A>,
    pub l3: Linear<A>,
}

impl<A: Scalar> InversionNet<A> {
    fn seeded(rng: &mut ChaCha8Rng, feature_dim: usize, token_dim: usize) -> Self {
        let hidden = 2 * token_dim;
        // The output layer starts near zero so the initial pseudo-tokens
        // carry almost no random content; what a token contains after
        // training is then dominated by what the objective asked for.
        let mut l3 = Linear::seeded(rng, hidden, token_dim);
        let shrink = A::from_f64_(1e-2);
        l3.weight = l3.weight.scale(shrink);
        l3.bias = l3.bias.scale(shrink);
        Self {
            l1: Linear::seeded(rng, feature_dim, hidden),
            l2: Linear::seeded(rng, hidden, hidden),
            l3,
        }
    }

    fn bind<'t>(&self, tape: &'t Tape<A>) -> BoundInversionNet<'t, A> {
        BoundInversionNet {
            l1: self.l1.bind(tape),
            l2: self.l2.bind(tape),
            l3: self.l3.bind(tape),
        }
    }
}

pub struct BoundInversionNet<'t, A: Scalar> {
    pub l1: BoundLinear<'t, A>,
    pub l2: BoundLinear<'t, A>,
    pub l3: BoundLinear<'t, A>,
}

impl<'t, A: Scalar> BoundInversionNet<'t, A> {
    pub fn forward(&self, v: Var<'t, A>) -> Var<'t, A> {
        self.l3
            .forward(self.l2.forward(self.l1.forward(v).tanh()).tanh())
    }

    pub fn param_vars(&self) -> Vec<Var<'t, A>> {
        vec![
            self.l1.weight,
            self.l1.bias,
            self.l2.weight,
            self.l2.bias,
            self.l3.weight,
            self.l3.bias,
        ]
    }
}

/// The set of per-attribute inversion networks.
#[derive(Debug, Clone, PartialEq)]
pub struct InversionNetworks<A: Scalar> {
    pub nets: Vec<InversionNet<A>>,
    pub feature_dim: usize,
    pub token_dim: usize,
    pub frozen: bool,
}

impl<A: Scalar> InversionNetworks<A> {
    pub fn seeded(seed: u64, attribute_count: usize, feature_dim: usize, token_dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            nets: (0..attribute_count)
                .map(|_| InversionNet::seeded(&mut rng, feature_dim, token_dim))
                .collect(),
            feature_dim,
            token_dim,
            frozen: false,
        }
    }

    pub fn attribute_count(&self) -> usize {
        self.nets.len()
    }

    /// Map one image feature to its pseudo-token set.
    pub fn invert(&self, v: &Tensor<A>) -> Result<PseudoTokenSet<A>> {
        if v.shape() != [self.feature_dim] {
            return Err(Error::Input(format!(
                "feature shape {:?} does not match dimension {}",
                v.shape(),
                self.feature_dim
            )));
        }
        let tape = Tape::new();
        let vv = tape.leaf(v.clone());
        let bound = self.bind(&tape);
        Ok(PseudoTokenSet {
            vectors: bound.forward(vv).iter().map(Var::value).collect(),
        })
    }

    pub fn bind<'t>(&self, tape: &'t Tape<A>) -> BoundInversionNetworks<'t, A> {
        BoundInversionNetworks {
            nets: self.nets.iter().map(|n| n.bind(tape)).collect(),
        }
    }

    pub fn named_arrays(&self) -> Vec<(String, Tensor<A>)> {
        let mut arrays = Vec::new();
        for (i, net) in self.nets.iter().enumerate() {
            for (name, t) in [
                ("l1.weight", &net.l1.weight),
                ("l1.bias", &net.l1.bias),
                ("l2.weight", &net.l2.weight),
                ("l2.bias", &net.l2.bias),
                ("l3.weight", &net.l3.weight),
                ("l3.bias", &net.l3.bias),
            ] {
                arrays.push((format!("inversion.{i}.{name}"), t.clone()));
            }
        }
        arrays
    }

    pub fn from_arrays(arrays: &[(String, Tensor<A>)]) -> Result<Self> {
        let mut nets = Vec::new();
        let mut i = 0;
        loop {
            let find = |suffix: &str| -> Option<Tensor<A>> {
                let name = format!("inversion.{i}.{suffix}");
                arrays.iter().find(|(n, _)| *n == name).map(|(_, t)| t.clone())
            };
            let Some(w1) = find("l1.weight") else { break };
            let get = |suffix: &str| {
                find(suffix).ok_or_else(|| Error::Load(format!("missing array inversion.{i}.{suffix}")))
            };
            nets.push(InversionNet {
                l1: Linear { weight: w1, bias: get("l1.bias")? },
                l2: Linear { weight: get("l2.weight")?, bias: get("l2.bias")? },
                l3: Linear { weight: get("l3.weight")?, bias: get("l3.bias")? },
            });
            i += 1;
        }
        if nets.is_empty() {
            return Err(Error::Load("no inversion network arrays found".into()));
        }
        let feature_dim = nets[0].l1.weight.shape()[1];
        let token_dim = nets[0].l3.weight.shape()[0];
        Ok(Self { nets, feature_dim, token_dim, frozen: true })
    }

    pub fn checksum(&self) -> [u8; 32] {
        let arrays = self.named_arrays();
        let refs: Vec<(String, &Tensor<A>)> = arrays.iter().map(|(n, t)| (n.clone(), t)).collect();
        named_checksum(&refs)
    }
}

pub struct BoundInversionNetworks<'t, A: Scalar> {
    pub nets: Vec<BoundInversionNet<'t, A>>,
}

impl<'t, A: Scalar> BoundInversionNetworks<'t, A> {
    /// Pseudo-token vars for one image feature var.
    pub fn forward(&self, v: Var<'t, A>) -> Vec<Var<'t, A>> {
        self.nets.iter().map(|n| n.forward(v)).collect()
    }

    pub fn param_vars(&self) -> Vec<Var<'t, A>> {
        self.nets.iter().flat_map(|n| n.param_vars()).collect()
    }
}

/// Compose per-sample prompts from pseudo-token sets and encode them.
pub fn compose_prompt_batch<A: Scalar>(
    pseudo_batch: &[PseudoTokenSet<A>],
    tokens: &TokenizedPrompt,
    text: &TextEncoder<A>,
) -> Result<Vec<Tensor<A>>> {
    pseudo_batch
        .iter()
        .map(|p| {
            let rows = crate::prompt::inject_pseudo_tokens(tokens, p, text.embedding_table())?;
            text.encode_token_sequence(&rows)
        })
        .collect()
}

/// Identity-aware contrastive loss: negative mean log-softmax over the
/// positive set C(n), both directions, averaged over the batch.
pub fn inversion_contrastive_loss<A: Scalar>(
    image_feats: &[Tensor<A>],
    text_feats: &[Tensor<A>],
    pids: &[u32],
    tau: A,
) -> Result<A> {
    let tape = Tape::new();
    let iv: Vec<_> = image_feats.iter().map(|f| tape.leaf(f.clone())).collect();
    let tv: Vec<_> = text_feats.iter().map(|f| tape.leaf(f.clone())).collect();
    let (total, _, _) = inversion_contrastive_loss_var(&tape, &iv, &tv, pids, tau, true)?;
    Ok(total.value().item())
}

/// Tape variant; returns (total, i2t, t2i). `include_self` controls whether
/// the anchor belongs to its own positive set.
pub fn inversion_contrastive_loss_var<'t, A: Scalar>(
    tape: &'t Tape<A>,
    image_feats: &[Var<'t, A>],
    text_feats: &[Var<'t, A>],
    pids: &[u32],
    tau: A,
    include_self: bool,
) -> Result<(Var<'t, A>, Var<'t, A>, Var<'t, A>)> {
    let n = image_feats.len();
    if n < 1 || text_feats.len() != n || pids.len() != n {
        return Err(Error::Input("batch arrays must share a nonzero length".into()));
    }
    if tau <= A::zero() {
        return Err(Error::Input("temperature must be positive".into()));
    }
    for f in image_feats.iter().chain(text_feats) {
        if f.value().norm() == A::zero() {
            return Err(Error::Normalization("zero-norm feature vector".into()));
        }
    }
    let positives: Vec<Vec<usize>> = (0..n)
        .map(|a| {
            (0..n)
                .filter(|&b| pids[b] == pids[a] && (include_self || b != a))
                .collect()
        })
        .collect();
    if let Some(a) = positives.iter().position(Vec::is_empty) {
        return Err(Error::BatchComposition(format!(
            "sample {a} (pid {}) has an empty positive set",
            pids[a]
        )));
    }

    let inv_tau = A::one() / tau;
    let img: Vec<_> = image_feats.iter().map(|f| f.l2_normalize()).collect();
    let txt: Vec<_> = text_feats.iter().map(|f| f.l2_normalize()).collect();
    let sims: Vec<Vec<Var<'t, A>>> = img
        .iter()
        .map(|v| txt.iter().map(|t| v.dot(*t).scale(inv_tau)).collect())
        .collect();

    let mut i2t_terms = Vec::with_capacity(n);
    let mut t2i_terms = Vec::with_capacity(n);
    for a in 0..n {
        let row = crate::autodiff::concat_scalars(tape, &sims[a]);
        let lse_row = row.logsumexp();
        let pos_row: Vec<_> = positives[a].iter().map(|&c| lse_row.sub(sims[a][c])).collect();
        i2t_terms.push(mean_scalars(tape, &pos_row));

        let col: Vec<_> = (0..n).map(|b| sims[b][a]).collect();
        let col = crate::autodiff::concat_scalars(tape, &col);
        let lse_col = col.logsumexp();
        let pos_col: Vec<_> = positives[a].iter().map(|&c| lse_col.sub(sims[c][a])).collect();
        t2i_terms.push(mean_scalars(tape, &pos_col));
    }
    let l_i2t = mean_scalars(tape, &i2t_terms);
    let l_t2i = mean_scalars(tape, &t2i_terms);
    Ok((l_i2t.add(l_t2i), l_i2t, l_t2i))
}

/// Stage-1 training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage1Config {
    pub epochs: usize,
    /// Identities per batch.
    pub p: usize,
    /// Instances per identity.
    pub k: usize,
    pub learning_rate: f64,
    pub tau: f64,
    pub seed: u64,
    /// Whether C(n) contains the anchor itself.
    pub include_self: bool,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            epochs: 120,
            p: 4,
            k: 2,
            learning_rate: 1e-3,
            tau: 0.07,
            seed: 0,
            include_self: true,
        }
    }
}

/// Per-epoch training log entry, serialized as JSON lines.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub epoch: usize,
    pub l_i2t: f64,
    pub l_t2i: f64,
    pub total: f64,
}

/// Deterministic P x K identity sampler: returns index batches.
pub(crate) fn pk_batches(
    pids: &[u32],
    p: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let mut by_pid: Vec<(u32, Vec<usize>)> = Vec::new();
    for (i, &pid) in pids.iter().enumerate() {
        match by_pid.iter_mut().find(|(q, _)| *q == pid) {
            Some((_, v)) => v.push(i),
            None => by_pid.push((pid, vec![i])),
        }
    }
    let mut id_order: Vec<usize> = (0..by_pid.len()).collect();
    id_order.shuffle(rng);
    for (_, v) in by_pid.iter_mut() {
        v.shuffle(rng);
    }
    let mut batches = Vec::new();
    for ids in id_order.chunks(p) {
        let mut batch = Vec::new();
        for &gi in ids {
            let inst = &by_pid[gi].1;
            for j in 0..k.min(inst.len()) {
                batch.push(inst[j]);
            }
        }
        if batch.len() >= 2 {
            batches.push(batch);
        }
    }
    batches
}

/// Train the inversion networks (stage 1). Encoders stay frozen; the nets
/// are frozen on return.
pub fn train_inversion<A: Scalar>(
    images: &[Tensor<A>],
    pids: &[u32],
    visual: &VisualEncoder<A>,
    text: &TextEncoder<A>,
    tokens: &TokenizedPrompt,
    nets: &mut InversionNetworks<A>,
    cfg: &Stage1Config,
) -> Result<Vec<TrainLogEntry>> {
    if images.len() != pids.len() || images.len() < 2 {
        return Err(Error::Input("need at least two labelled images".into()));
    }
    let feats: Vec<Tensor<A>> = images
        .iter()
        .map(|img| visual.encode_image(img))
        .collect::<Result<_>>()?;
    let tau = A::from_f64_(cfg.tau);
    let mut opt: Adam<A> = Adam::new(A::from_f64_(cfg.learning_rate));
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9e3779b97f4a7c15));
        let batches = pk_batches(pids, cfg.p, cfg.k, &mut rng);
        let mut epoch_i2t = 0.0;
        let mut epoch_t2i = 0.0;
        let mut count = 0usize;
        for (bi, batch) in batches.iter().enumerate() {
            let tape = Tape::new();
            let bound_nets = nets.bind(&tape);
            let bound_text = text.bind(&tape);
            let mut img_vars = Vec::with_capacity(batch.len());
            let mut txt_vars = Vec::with_capacity(batch.len());
            let mut batch_pids = Vec::with_capacity(batch.len());
            for &idx in batch {
                let v = tape.leaf(feats[idx].clone());
                let pseudo = bound_nets.forward(v);
                let rows =
                    inject_pseudo_tokens_var(&tape, tokens, &pseudo, text.embedding_table());
                txt_vars.push(bound_text.forward(rows));
                img_vars.push(v);
                batch_pids.push(pids[idx]);
            }
            let (total, l_i2t, l_t2i) = inversion_contrastive_loss_var(
                &tape,
                &img_vars,
                &txt_vars,
                &batch_pids,
                tau,
                cfg.include_self,
            )?;
            let (tv, iv, tv2) = (
                total.value().item().to_f64_(),
                l_i2t.value().item().to_f64_(),
                l_t2i.value().item().to_f64_(),
            );
            if !tv.is_finite() {
                return Err(Error::NonFinite(format!(
                    "epoch {epoch} batch {bi}: total={tv} i2t={iv} t2i={tv2}"
                )));
            }
            let grads = tape.backward(total);
            let param_vars = bound_nets.param_vars();
            let grad_tensors: Vec<Tensor<A>> =
                param_vars.iter().map(|p| grads.get_or_zeros(*p)).collect();
            let mut params: Vec<&mut Tensor<A>> = Vec::new();
            for net in nets.nets.iter_mut() {
                params.push(&mut net.l1.weight);
                params.push(&mut net.l1.bias);
                params.push(&mut net.l2.weight);
                params.push(&mut net.l2.bias);
                params.push(&mut net.l3.weight);
                params.push(&mut net.l3.bias);
            }
            opt.step(&mut params, &grad_tensors);
            epoch_i2t += iv;
            epoch_t2i += tv2;
            count += 1;
        }
        let denom = count.max(1) as f64;
        log.push(TrainLogEntry {
            epoch,
            l_i2t: epoch_i2t / denom,
            l_t2i: epoch_t2i / denom,
            total: (epoch_i2t + epoch_t2i) / denom,
        });
    }
    nets.frozen = true;
    Ok(log)
}
