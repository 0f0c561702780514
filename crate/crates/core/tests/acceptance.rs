//! Acceptance suite: one test per criterion, each printing a single
//! pass/fail line. Run with `cargo test --test acceptance -- --nocapture`
//! to see the lines as they complete.

use std::sync::LazyLock;
use std::time::Instant;

use prompt_attack_core::attack::{
    apply_perturbation, apply_perturbation_var, hardest_negative, semantic_attack_loss,
    semantic_attack_loss_var, surrogate_attack_loss, surrogate_attack_loss_var, AttackConfig,
    DistanceMetric, GeneratorKind, PerturbationGenerator, SurrogateModel,
};
use prompt_attack_core::autodiff::Tape;
use prompt_attack_core::checkpoint::save_checkpoint;
use prompt_attack_core::defenses::{jpeg_defense, randomization_defense};
use prompt_attack_core::encoders::{
    build_reference_encoders, encoders_to_arrays, EncoderWeights, JointSpaceConfig, TextEncoder,
    VisualEncoder,
};
use prompt_attack_core::interpret::rank_words;
use prompt_attack_core::inversion::{
    compose_prompt_batch, inversion_contrastive_loss, inversion_contrastive_loss_var,
    train_inversion, InversionNetworks, PseudoTokenSet, Stage1Config,
};
use prompt_attack_core::metrics::{evaluate, EvaluationReport, RetrievalItem};
use prompt_attack_core::prompt::{
    clip_contrastive_loss, inject_pseudo_tokens_var, parse_template,
    tokenize, TokenizedPrompt, Vocabulary, DEFAULT_TEMPLATE,
};
use prompt_attack_core::synthdata::{
    all_color_words, attribute_vocabulary, calibrate_color_embeddings, generate_dataset,
    HandcraftedExtractor, SyntheticDataset, SyntheticSpec, ATTRIBUTE_COUNT,
};
use prompt_attack_core::tensor::Tensor;
use prompt_attack_core::Real;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const EPSILON: f64 = 8.0 / 255.0;

fn report(criterion: usize, name: &str, pass: bool) {
    println!(
        "acceptance criterion {criterion} ({name}): {}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "acceptance criterion {criterion} ({name}) failed");
}

fn rel_close(a: f64, b: f64, rtol: f64) -> bool {
    (a - b).abs() <= rtol * a.abs().max(b.abs()).max(1e-12)
}

// ---------------------------------------------------------------------------
// Criterion 1: brute-force loss oracles
// ---------------------------------------------------------------------------

fn bf_normalize(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn bf_dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn bf_l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn bf_cos(a: &[f64], b: &[f64]) -> f64 {
    bf_dot(a, b) / (bf_dot(a, a).sqrt() * bf_dot(b, b).sqrt())
}

fn bf_logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Symmetric InfoNCE with diagonal positives.
fn bf_clip_loss(img: &[Vec<f64>], txt: &[Vec<f64>], tau: f64) -> f64 {
    let n = img.len();
    let iv: Vec<Vec<f64>> = img.iter().map(|v| bf_normalize(v)).collect();
    let tv: Vec<Vec<f64>> = txt.iter().map(|v| bf_normalize(v)).collect();
    let s: Vec<Vec<f64>> = iv
        .iter()
        .map(|a| tv.iter().map(|b| bf_dot(a, b) / tau).collect())
        .collect();
    let mut i2t = 0.0;
    let mut t2i = 0.0;
    for a in 0..n {
        let row: Vec<f64> = (0..n).map(|b| s[a][b]).collect();
        let col: Vec<f64> = (0..n).map(|b| s[b][a]).collect();
        i2t += bf_logsumexp(&row) - s[a][a];
        t2i += bf_logsumexp(&col) - s[a][a];
    }
    i2t / n as f64 + t2i / n as f64
}

/// Identity-aware contrastive loss over the positive set of each anchor.
fn bf_inversion_loss(img: &[Vec<f64>], txt: &[Vec<f64>], pids: &[u32], tau: f64) -> f64 {
    let n = img.len();
    let iv: Vec<Vec<f64>> = img.iter().map(|v| bf_normalize(v)).collect();
    let tv: Vec<Vec<f64>> = txt.iter().map(|v| bf_normalize(v)).collect();
    let s: Vec<Vec<f64>> = iv
        .iter()
        .map(|a| tv.iter().map(|b| bf_dot(a, b) / tau).collect())
        .collect();
    let mut i2t = 0.0;
    let mut t2i = 0.0;
    for a in 0..n {
        let pos: Vec<usize> = (0..n).filter(|&b| pids[b] == pids[a]).collect();
        let row: Vec<f64> = (0..n).map(|b| s[a][b]).collect();
        let col: Vec<f64> = (0..n).map(|b| s[b][a]).collect();
        let lse_row = bf_logsumexp(&row);
        let lse_col = bf_logsumexp(&col);
        i2t += pos.iter().map(|&c| lse_row - s[a][c]).sum::<f64>() / pos.len() as f64;
        t2i += pos.iter().map(|&c| lse_col - s[c][a]).sum::<f64>() / pos.len() as f64;
    }
    i2t / n as f64 + t2i / n as f64
}

/// Dissimilarity used for picking the furthest different-identity sample.
fn bf_dissim(a: &[f64], b: &[f64], metric: DistanceMetric) -> f64 {
    match metric {
        DistanceMetric::L2 => bf_l2(a, b),
        DistanceMetric::Cosine => -bf_cos(a, b),
    }
}

fn bf_furthest_negative(clean: &[Vec<f64>], pids: &[u32], metric: DistanceMetric) -> Vec<usize> {
    (0..clean.len())
        .map(|a| {
            let mut best: Option<(usize, f64)> = None;
            for b in 0..clean.len() {
                if pids[b] == pids[a] {
                    continue;
                }
                let d = bf_dissim(&clean[a], &clean[b], metric);
                if best.map_or(true, |(_, cur)| d > cur) {
                    best = Some((b, d));
                }
            }
            best.unwrap().0
        })
        .collect()
}

/// Hinge triplet in a single feature space, averaged over the batch.
fn bf_single_space_loss(
    clean: &[Vec<f64>],
    adv: &[Vec<f64>],
    pids: &[u32],
    alpha: f64,
    metric: DistanceMetric,
) -> f64 {
    let neg = bf_furthest_negative(clean, pids, metric);
    let n = clean.len();
    (0..n)
        .map(|a| (bf_l2(&adv[a], &clean[neg[a]]) - bf_l2(&adv[a], &clean[a]) + alpha).max(0.0))
        .sum::<f64>()
        / n as f64
}

/// Per-attribute hinge triplets, summed over attributes.
fn bf_semantic_loss(
    clean: &[Vec<Vec<f64>>],
    adv: &[Vec<Vec<f64>>],
    pids: &[u32],
    alpha: f64,
    metric: DistanceMetric,
) -> f64 {
    let attrs = clean[0].len();
    (0..attrs)
        .map(|i| {
            let c: Vec<Vec<f64>> = clean.iter().map(|s| s[i].clone()).collect();
            let a: Vec<Vec<f64>> = adv.iter().map(|s| s[i].clone()).collect();
            bf_single_space_loss(&c, &a, pids, alpha, metric)
        })
        .sum()
}

fn rand_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn to_tensor(v: &[f64]) -> Tensor<Real> {
    Tensor::new(vec![v.len()], v.to_vec())
}

#[test]
fn criterion_1_loss_oracles() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let attrs = ATTRIBUTE_COUNT;
    let dim = 7;
    let mut pass = true;
    for batch in 0..20 {
        let n = 2 + (batch % 7); // 2..=8
        // At least two identities so every anchor has a negative.
        let pids: Vec<u32> = (0..n).map(|i| (i % 2 + batch % 3) as u32).collect();
        let metric = if batch % 2 == 0 {
            DistanceMetric::L2
        } else {
            DistanceMetric::Cosine
        };
        let img: Vec<Vec<f64>> = (0..n).map(|_| rand_vec(&mut rng, dim)).collect();
        let txt: Vec<Vec<f64>> = (0..n).map(|_| rand_vec(&mut rng, dim)).collect();
        let adv: Vec<Vec<f64>> = (0..n).map(|_| rand_vec(&mut rng, dim)).collect();
        let tokens_clean: Vec<Vec<Vec<f64>>> = (0..n)
            .map(|_| (0..attrs).map(|_| rand_vec(&mut rng, dim)).collect())
            .collect();
        let tokens_adv: Vec<Vec<Vec<f64>>> = (0..n)
            .map(|_| (0..attrs).map(|_| rand_vec(&mut rng, dim)).collect())
            .collect();
        let tau = 0.07;
        let alpha = 0.3;

        let ti: Vec<Tensor<Real>> = img.iter().map(|v| to_tensor(v)).collect();
        let tt: Vec<Tensor<Real>> = txt.iter().map(|v| to_tensor(v)).collect();
        let ta: Vec<Tensor<Real>> = adv.iter().map(|v| to_tensor(v)).collect();
        let pc: Vec<PseudoTokenSet<Real>> = tokens_clean
            .iter()
            .map(|s| PseudoTokenSet {
                vectors: s.iter().map(|v| to_tensor(v)).collect(),
            })
            .collect();
        let pa: Vec<PseudoTokenSet<Real>> = tokens_adv
            .iter()
            .map(|s| PseudoTokenSet {
                vectors: s.iter().map(|v| to_tensor(v)).collect(),
            })
            .collect();

        let got_clip = clip_contrastive_loss(&ti, &tt, tau).unwrap();
        let got_inv = inversion_contrastive_loss(&ti, &tt, &pids, tau).unwrap();
        let got_sem = semantic_attack_loss(&pc, &pa, &pids, alpha, metric).unwrap();
        let got_sur = surrogate_attack_loss(&ti, &ta, &pids, alpha, metric).unwrap();

        pass &= rel_close(got_clip, bf_clip_loss(&img, &txt, tau), 1e-6);
        pass &= rel_close(got_inv, bf_inversion_loss(&img, &txt, &pids, tau), 1e-6);
        pass &= rel_close(got_sem, bf_semantic_loss(&tokens_clean, &tokens_adv, &pids, alpha, metric), 1e-6);
        pass &= rel_close(got_sur, bf_single_space_loss(&img, &adv, &pids, alpha, metric), 1e-6);
    }
    pass &= start.elapsed().as_secs_f64() < 10.0;
    report(1, "loss oracles match brute force", pass);
}

// ---------------------------------------------------------------------------
// Criterion 2: gradient checks against central finite differences
// ---------------------------------------------------------------------------

fn fd_grad(x: &Tensor<Real>, step: f64, mut f: impl FnMut(&Tensor<Real>) -> f64) -> Tensor<Real> {
    let mut grad = Tensor::zeros(&x.shape().to_vec());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - step;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (fp - fm) / (2.0 * step);
    }
    grad
}

fn max_rel_err(a: &Tensor<Real>, b: &Tensor<Real>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

fn build_vocab() -> Vocabulary {
    let template = parse_template(DEFAULT_TEMPLATE).unwrap();
    let mut words = template.words();
    words.extend(all_color_words());
    Vocabulary::from_words(words, template.slot_count()).unwrap()
}

/// Objective of the first training stage, evaluated without the tape.
fn stage1_objective(
    feats: &[Tensor<Real>],
    nets: &InversionNetworks<Real>,
    text: &TextEncoder<Real>,
    tokens: &TokenizedPrompt,
    pids: &[u32],
    tau: f64,
) -> f64 {
    let pseudo: Vec<PseudoTokenSet<Real>> = feats.iter().map(|f| nets.invert(f).unwrap()).collect();
    let tfeats = compose_prompt_batch(&pseudo, tokens, text).unwrap();
    inversion_contrastive_loss(feats, &tfeats, pids, tau).unwrap()
}

/// Objective of the second training stage, evaluated without the tape.
fn stage2_objective(
    images: &[Tensor<Real>],
    pids: &[u32],
    gen: &PerturbationGenerator<Real>,
    visual: &VisualEncoder<Real>,
    nets: &InversionNetworks<Real>,
    surrogate: &HandcraftedExtractor<Real>,
    clean_feats: &[Tensor<Real>],
    clean_tokens: &[PseudoTokenSet<Real>],
    alpha: f64,
    metric: DistanceMetric,
) -> f64 {
    let adv: Vec<Tensor<Real>> = images
        .iter()
        .map(|x| apply_perturbation(gen, x, EPSILON).unwrap())
        .collect();
    let adv_feats: Vec<Tensor<Real>> = adv.iter().map(|x| surrogate.extract(x).unwrap()).collect();
    let adv_tokens: Vec<PseudoTokenSet<Real>> = adv
        .iter()
        .map(|x| nets.invert(&visual.encode_image(x).unwrap()).unwrap())
        .collect();
    let l_m = surrogate_attack_loss(clean_feats, &adv_feats, pids, alpha, metric).unwrap();
    let l_s = semantic_attack_loss(clean_tokens, &adv_tokens, pids, alpha, metric).unwrap();
    l_m + l_s
}

#[test]
fn criterion_2_gradient_checks() {
    let start = Instant::now();
    let mut pass = true;
    let vocab = build_vocab();
    let template = parse_template(DEFAULT_TEMPLATE).unwrap();
    let tokens = tokenize(&template, &vocab).unwrap();
    let cfg = JointSpaceConfig {
        feature_dim: 8,
        token_embedding_dim: 8,
        max_sequence_length: 64,
        image_size: (32, 16),
    };
    let (visual, text) = build_reference_encoders::<Real>(3, &cfg, vocab.table_size()).unwrap();
    let nets = InversionNetworks::<Real>::seeded(7, ATTRIBUTE_COUNT, 8, 8);
    let pids = vec![0u32, 0, 1, 1];
    let tau = 0.07;
    let alpha = 0.3;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let feats: Vec<Tensor<Real>> = (0..4).map(|_| to_tensor(&rand_vec(&mut rng, 8))).collect();

    // Stage-1 objective w.r.t. the inversion-network parameters.
    let tape = Tape::new();
    let bound_nets = nets.bind(&tape);
    let bound_text = text.bind(&tape);
    let mut img_vars = Vec::new();
    let mut txt_vars = Vec::new();
    for f in &feats {
        let v = tape.leaf(f.clone());
        let pseudo = bound_nets.forward(v);
        let rows = inject_pseudo_tokens_var(&tape, &tokens, &pseudo, text.embedding_table());
        txt_vars.push(bound_text.forward(rows));
        img_vars.push(v);
    }
    let (total, _, _) =
        inversion_contrastive_loss_var(&tape, &img_vars, &txt_vars, &pids, tau, true).unwrap();
    let grads = tape.backward(total);
    let param_vars = bound_nets.param_vars();
    // One parameter tensor per network and slot; 6 tensors per network.
    for (net_i, slot) in [(0usize, 0usize), (1, 2), (2, 4), (3, 5), (4, 1)] {
        let auto = grads.get_or_zeros(param_vars[net_i * 6 + slot]);
        let base = match slot {
            0 => nets.nets[net_i].l1.weight.clone(),
            1 => nets.nets[net_i].l1.bias.clone(),
            2 => nets.nets[net_i].l2.weight.clone(),
            3 => nets.nets[net_i].l2.bias.clone(),
            4 => nets.nets[net_i].l3.weight.clone(),
            _ => nets.nets[net_i].l3.bias.clone(),
        };
        let fd = fd_grad(&base, 1e-5, |probe| {
            let mut n2 = nets.clone();
            match slot {
                0 => n2.nets[net_i].l1.weight = probe.clone(),
                1 => n2.nets[net_i].l1.bias = probe.clone(),
                2 => n2.nets[net_i].l2.weight = probe.clone(),
                3 => n2.nets[net_i].l2.bias = probe.clone(),
                4 => n2.nets[net_i].l3.weight = probe.clone(),
                _ => n2.nets[net_i].l3.bias = probe.clone(),
            }
            stage1_objective(&feats, &n2, &text, &tokens, &pids, tau)
        });
        pass &= max_rel_err(&auto, &fd) < 1e-4;
    }

    // Stage-2 objective w.r.t. the generator parameters (tiny generator).
    // Pixels sit in [0.2, 0.8] so the [0,1] clamp is inactive, and the
    // hinge pre-activations are checked to sit away from the kink.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let images: Vec<Tensor<Real>> = (0..4)
        .map(|_| {
            let mut t = Tensor::zeros(&[3, 32, 16]);
            for v in t.data_mut() {
                *v = rng.gen_range(0.2..0.8);
            }
            t
        })
        .collect();
    let surrogate = HandcraftedExtractor::<Real>::new(32, 16, 9).unwrap();
    let gen = PerturbationGenerator::<Real>::seeded(13, GeneratorKind::Tiny);
    let clean_feats: Vec<Tensor<Real>> =
        images.iter().map(|x| surrogate.extract(x).unwrap()).collect();
    let clean_tokens: Vec<PseudoTokenSet<Real>> = images
        .iter()
        .map(|x| nets.invert(&visual.encode_image(x).unwrap()).unwrap())
        .collect();
    let metric = DistanceMetric::L2;

    // Operating-point guards: negative-selection margins and hinge
    // pre-activations must be at least 1e-3 from their decision points.
    let neg = hardest_negative(&clean_feats, &pids, metric).unwrap();
    for a in 0..4 {
        let mut ds: Vec<f64> = (0..4)
            .filter(|&b| pids[b] != pids[a])
            .map(|b| clean_feats[a].l2_distance(&clean_feats[b]))
            .collect();
        ds.sort_by(|x, y| y.partial_cmp(x).unwrap());
        pass &= ds[0] - ds[1] > 1e-3;
        let adv = apply_perturbation(&gen, &images[a], EPSILON).unwrap();
        let adv_f = surrogate.extract(&adv).unwrap();
        let pre = adv_f.l2_distance(&clean_feats[neg[a]]) - adv_f.l2_distance(&clean_feats[a]) + alpha;
        pass &= pre.abs() > 1e-3;
    }

    let tape = Tape::new();
    let bound_gen = gen.bind(&tape);
    let bound_visual = visual.bind(&tape);
    let bound_nets = nets.bind(&tape);
    let mut adv_feats = Vec::new();
    let mut adv_tokens = Vec::new();
    for x in &images {
        let xv = tape.leaf(x.clone());
        let x_adv = apply_perturbation_var(&bound_gen, xv, EPSILON);
        adv_feats.push(surrogate.extract_var(&tape, x_adv));
        adv_tokens.push(bound_nets.forward(bound_visual.forward(x_adv)));
    }
    let l_m =
        surrogate_attack_loss_var(&tape, &clean_feats, &adv_feats, &pids, alpha, metric).unwrap();
    let l_s =
        semantic_attack_loss_var(&tape, &clean_tokens, &adv_tokens, &pids, alpha, metric).unwrap();
    let total = l_m.add(l_s);
    let grads = tape.backward(total);
    let gen_param_vars = bound_gen.param_vars();
    let param_count = gen_param_vars.len();
    for i in 0..param_count {
        let auto = grads.get_or_zeros(gen_param_vars[i]);
        let mut base_holder = gen.clone();
        let base = base_holder.param_tensors_mut()[i].clone();
        let fd = fd_grad(&base, 1e-5, |probe| {
            let mut g2 = gen.clone();
            *g2.param_tensors_mut()[i] = probe.clone();
            stage2_objective(
                &images,
                &pids,
                &g2,
                &visual,
                &nets,
                &surrogate,
                &clean_feats,
                &clean_tokens,
                alpha,
                metric,
            )
        });
        pass &= max_rel_err(&auto, &fd) < 1e-4;
    }

    pass &= start.elapsed().as_secs_f64() < 60.0;
    report(2, "autodiff gradients match finite differences", pass);
}

// ---------------------------------------------------------------------------
// Criterion 3: perturbation bound scan
// ---------------------------------------------------------------------------

#[test]
fn criterion_3_epsilon_bound() {
    let start = Instant::now();
    let spec = SyntheticSpec {
        identities: 125,
        cameras: 2,
        images_per_camera: 4,
        height: 64,
        width: 32,
        jitter: 0.02,
        seed: 4,
    };
    let ds: SyntheticDataset<Real> = generate_dataset(&spec).unwrap();
    assert_eq!(ds.len(), 1000);

    let untrained = PerturbationGenerator::<Real>::seeded(0, GeneratorKind::Reference);
    // A briefly trained tiny generator on a small labelled subset.
    let cfg = JointSpaceConfig {
        feature_dim: 16,
        token_embedding_dim: 16,
        max_sequence_length: 64,
        image_size: (64, 32),
    };
    let vocab = build_vocab();
    let (visual, _) = build_reference_encoders::<Real>(1, &cfg, vocab.table_size()).unwrap();
    let nets = InversionNetworks::<Real>::seeded(2, ATTRIBUTE_COUNT, 16, 16);
    let surrogate = HandcraftedExtractor::<Real>::new(64, 32, 0).unwrap();
    let mut trained = PerturbationGenerator::<Real>::seeded(3, GeneratorKind::Tiny);
    let sub_images: Vec<Tensor<Real>> = ds.images[..16].to_vec();
    let sub_pids: Vec<u32> = ds.items[..16].iter().map(|m| m.pid).collect();
    let attack_cfg = AttackConfig {
        epochs: 1,
        generator: GeneratorKind::Tiny,
        ..AttackConfig::default()
    };
    prompt_attack_core::attack::train_attack(
        &sub_images,
        &sub_pids,
        &visual,
        &nets,
        &surrogate,
        &mut trained,
        &attack_cfg,
    )
    .unwrap();

    let mut pass = true;
    for gen in [&untrained, &trained] {
        for x in &ds.images {
            let adv = apply_perturbation(gen, x, EPSILON).unwrap();
            for (a, b) in adv.data().iter().zip(x.data()) {
                pass &= (a - b).abs() <= EPSILON + 1e-7;
                pass &= (0.0..=1.0).contains(a);
            }
        }
    }
    pass &= start.elapsed().as_secs_f64() < 30.0;
    report(3, "perturbations respect the pixel bound", pass);
}

// ---------------------------------------------------------------------------
// Criterion 4: published-table metric arithmetic
// ---------------------------------------------------------------------------

fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

#[test]
fn criterion_4_metric_arithmetic() {
    use prompt_attack_core::metrics::{aap, mdr};
    let mut pass = true;

    // Cross-dataset row: three clean victim scores and three attacked ones.
    let clean_a = aap(&[41.9, 75.5, 52.3]);
    let adv_a = aap(&[4.2, 7.6, 5.3]);
    pass &= (clean_a - 56.6).abs() < 0.05 && round1(clean_a) == 56.6;
    let drop_a = mdr(clean_a, adv_a).unwrap();
    pass &= (drop_a - 89.9).abs() < 0.05 && round1(drop_a) == 89.9;

    // Cross-model row: eight attacked victim scores.
    let adv_b = aap(&[6.1, 2.2, 6.7, 6.4, 3.7, 4.7, 10.4, 15.0]);
    pass &= (adv_b - 6.9).abs() < 0.05 && round1(adv_b) == 6.9;
    let drop_b = mdr(65.0, adv_b).unwrap();
    pass &= (drop_b - 89.4).abs() < 0.05 && round1(drop_b) == 89.4;

    // Ablation row.
    let drop_c = mdr(76.7, 21.2).unwrap();
    pass &= (drop_c - 72.4).abs() < 0.05 && round1(drop_c) == 72.4;

    report(4, "published metric arithmetic reproduced", pass);
}

// ---------------------------------------------------------------------------
// Criteria 5-9: shared end-to-end pipeline
// ---------------------------------------------------------------------------

const PIPE_H: usize = 128;
const PIPE_W: usize = 64;

struct RunArtifacts {
    report: EvaluationReport,
    jpeg_report: EvaluationReport,
    checkpoint_bytes: Vec<u8>,
    interp_macro: f64,
    train_secs: f64,
    encoders_unchanged: bool,
    nets_unchanged_in_stage2: bool,
    surrogate_unchanged: bool,
}

fn encoder_checksum(visual: &VisualEncoder<Real>, text: &TextEncoder<Real>) -> [u8; 32] {
    EncoderWeights {
        arrays: encoders_to_arrays(visual, text),
        frozen: true,
    }
    .checksum()
}

fn run_pipeline() -> RunArtifacts {
    let spec = SyntheticSpec {
        identities: 16,
        cameras: 2,
        images_per_camera: 4,
        height: PIPE_H,
        width: PIPE_W,
        jitter: 0.02,
        seed: 0,
    };
    let ds: SyntheticDataset<Real> = generate_dataset(&spec).unwrap();
    let pids = ds.pids();

    let vocab = build_vocab();
    let template = parse_template(DEFAULT_TEMPLATE).unwrap();
    let tokens = tokenize(&template, &vocab).unwrap();
    let cfg = JointSpaceConfig {
        feature_dim: 96,
        token_embedding_dim: 96,
        max_sequence_length: 64,
        image_size: (PIPE_H, PIPE_W),
    };
    let (visual, mut text) = build_reference_encoders::<Real>(0, &cfg, vocab.table_size()).unwrap();
    calibrate_color_embeddings(&mut text, &vocab, &visual, PIPE_H, PIPE_W).unwrap();

    let enc_before = encoder_checksum(&visual, &text);
    let surrogate = HandcraftedExtractor::<Real>::new(PIPE_H, PIPE_W, 0).unwrap();
    let sur_before = surrogate.checksum();

    let t0 = Instant::now();
    let mut nets = InversionNetworks::<Real>::seeded(0, ATTRIBUTE_COUNT, 96, 96);
    let stage1 = Stage1Config {
        epochs: 120,
        learning_rate: 1e-3,
        ..Stage1Config::default()
    };
    train_inversion(&ds.images, &pids, &visual, &text, &tokens, &mut nets, &stage1).unwrap();
    let nets_after_stage1 = nets.checksum();

    let mut gen = PerturbationGenerator::<Real>::seeded(0, GeneratorKind::Reference);
    let attack_cfg = AttackConfig {
        learning_rate: 1e-3,
        epochs: 10,
        ..AttackConfig::default()
    };
    prompt_attack_core::attack::train_attack(
        &ds.images,
        &pids,
        &visual,
        &nets,
        &surrogate,
        &mut gen,
        &attack_cfg,
    )
    .unwrap();
    let train_secs = t0.elapsed().as_secs_f64();

    let encoders_unchanged = encoder_checksum(&visual, &text) == enc_before;
    let nets_unchanged_in_stage2 = nets.checksum() == nets_after_stage1;
    let surrogate_unchanged = surrogate.checksum() == sur_before;

    // Retrieval evaluation: first camera as queries, the rest as gallery.
    let (q, g) = ds.query_gallery_split();
    let pick = |idx: &[usize]| -> (Vec<Tensor<Real>>, Vec<RetrievalItem>) {
        (
            idx.iter().map(|&i| ds.images[i].clone()).collect(),
            idx.iter().map(|&i| ds.items[i]).collect(),
        )
    };
    let (queries, qm) = pick(&q);
    let (gallery, gm) = pick(&g);
    let models: Vec<&dyn SurrogateModel<Real>> = vec![&surrogate];
    let report = evaluate(
        &models,
        &queries,
        &qm,
        &gallery,
        &gm,
        &gen,
        EPSILON,
        DistanceMetric::L2,
        None,
    )
    .unwrap();
    let jpeg_transform = |x: &Tensor<Real>| jpeg_defense(x, 60);
    let jpeg_report = evaluate(
        &models,
        &queries,
        &qm,
        &gallery,
        &gm,
        &gen,
        EPSILON,
        DistanceMetric::L2,
        Some(&jpeg_transform),
    )
    .unwrap();

    // Interpretation accuracy on held-out identities.
    let held: SyntheticDataset<Real> = generate_dataset(&SyntheticSpec {
        identities: 12,
        cameras: 2,
        images_per_camera: 1,
        height: PIPE_H,
        width: PIPE_W,
        jitter: 0.02,
        seed: 99,
    })
    .unwrap();
    let attr_vocab = attribute_vocabulary();
    let mut per_attr_acc = vec![0.0f64; ATTRIBUTE_COUNT];
    for (img, meta) in held.images.iter().zip(&held.items) {
        let pseudo = nets.invert(&visual.encode_image(img).unwrap()).unwrap();
        let truth = &held.attributes[&meta.pid];
        for a in 0..ATTRIBUTE_COUNT {
            let ranked = rank_words(
                &pseudo.vectors[a],
                &attr_vocab.attributes[a].words,
                &text,
                &vocab,
            )
            .unwrap();
            if ranked[0].word == truth.word(a) {
                per_attr_acc[a] += 1.0;
            }
        }
    }
    let n_held = held.len() as f64;
    let interp_macro =
        per_attr_acc.iter().map(|c| c / n_held).sum::<f64>() / ATTRIBUTE_COUNT as f64;

    // Checkpoint bytes for the determinism comparison.
    let mut arrays = encoders_to_arrays(&visual, &text);
    for (name, t) in nets.named_arrays() {
        arrays.push((format!("inversion.{name}"), t));
    }
    for (name, t) in gen.named_arrays() {
        arrays.push((format!("generator.{name}"), t));
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &arrays, "acceptance").unwrap();
    let checkpoint_bytes = std::fs::read(&path).unwrap();

    RunArtifacts {
        report,
        jpeg_report,
        checkpoint_bytes,
        interp_macro,
        train_secs,
        encoders_unchanged,
        nets_unchanged_in_stage2,
        surrogate_unchanged,
    }
}

static PIPELINE: LazyLock<(RunArtifacts, RunArtifacts)> =
    LazyLock::new(|| (run_pipeline(), run_pipeline()));

#[test]
fn criterion_5_end_to_end_attack() {
    let run = &PIPELINE.0;
    let victim = &run.report.per_model[0];
    println!(
        "  [criterion 5] train {:.1}s clean mAP {:.2} adv mAP {:.2} drop {:.2}%",
        run.train_secs, victim.clean_map, victim.adversarial_map, victim.drop_rate
    );
    let mut pass = run.train_secs < 600.0;
    pass &= victim.clean_map >= 95.0;
    pass &= victim.drop_rate >= 50.0;
    report(5, "end-to-end synthetic attack", pass);
}

#[test]
fn criterion_6_interpretability() {
    let run = &PIPELINE.0;
    println!("  [criterion 6] macro top-1 accuracy {:.3}", run.interp_macro);
    report(
        6,
        "pseudo-token interpretation accuracy",
        run.interp_macro >= 0.6,
    );
}

#[test]
fn criterion_7_defenses() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut pass = true;
    for _ in 0..100 {
        let mut img = Tensor::<Real>::zeros(&[3, 24, 16]);
        for v in img.data_mut() {
            *v = rng.gen_range(0.0..=1.0);
        }
        let j = jpeg_defense(&img, 60).unwrap();
        let r = randomization_defense(&img, 0.875, 1.0, &mut rng).unwrap();
        for out in [&j, &r] {
            pass &= out.shape() == img.shape();
            pass &= out.data().iter().all(|v| (0.0..=1.0).contains(v));
        }
    }
    let run = &PIPELINE.0;
    println!(
        "  [criterion 7] JPEG-defended mDR {:.2}%",
        run.jpeg_report.mean_drop_rate
    );
    pass &= run.jpeg_report.mean_drop_rate >= 25.0;
    report(7, "defenses preserve shape and attack survives JPEG", pass);
}

#[test]
fn criterion_8_determinism() {
    let (a, b) = (&PIPELINE.0, &PIPELINE.1);
    let mut pass = a.checkpoint_bytes == b.checkpoint_bytes;
    let close = |x: f64, y: f64| (x - y).abs() <= 1e-6;
    pass &= close(a.report.clean_aap, b.report.clean_aap);
    pass &= close(a.report.adversarial_aap, b.report.adversarial_aap);
    pass &= close(a.report.mean_drop_rate, b.report.mean_drop_rate);
    for (ma, mb) in a.report.per_model.iter().zip(&b.report.per_model) {
        pass &= ma.model == mb.model;
        pass &= close(ma.clean_map, mb.clean_map);
        pass &= close(ma.adversarial_map, mb.adversarial_map);
        pass &= close(ma.drop_rate, mb.drop_rate);
        pass &= close(ma.clean_rank1, mb.clean_rank1);
        pass &= close(ma.adversarial_rank1, mb.adversarial_rank1);
    }
    report(8, "identical seeds give identical runs", pass);
}

#[test]
fn criterion_9_freeze_contracts() {
    let run = &PIPELINE.0;
    let pass = run.encoders_unchanged && run.nets_unchanged_in_stage2 && run.surrogate_unchanged;
    report(9, "frozen components stay frozen", pass);
}
