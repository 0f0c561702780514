//! Frozen joint vision-language space: a visual encoder for images and a
//! text encoder operating on token-embedding sequences.
//!
//! The reference encoders are tiny seeded networks that stand in for a
//! pretrained backbone: they are deterministic, frozen after construction
//! and differentiable end to end, which is all the rest of the pipeline
//! requires of them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{fan_in_tensor, orthogonal_tensor, BoundLinear, Linear};
use crate::scalar::Scalar;
use crate::tensor::{named_checksum, Tensor};

/// Dimensions of the joint space and its inputs.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct JointSpaceConfig {
    pub feature_dim: usize,
    pub token_embedding_dim: usize,
    pub max_sequence_length: usize,
    /// (height, width) in pixels.
    pub image_size: (usize, usize),
}

impl Default for JointSpaceConfig {
    fn default() -> Self {
        Self {
            feature_dim: 96,
            token_embedding_dim: 96,
            max_sequence_length: 64,
            image_size: (128, 64),
        }
    }
}

impl JointSpaceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0
            || self.token_embedding_dim == 0
            || self.max_sequence_length == 0
            || self.image_size.0 == 0
            || self.image_size.1 == 0
        {
            return Err(Error::Config(
                "joint-space dimensions must be strictly positive".into(),
            ));
        }
        Ok(())
    }
}

/// Named weight arrays plus the frozen flag.
#[derive(Debug, Clone)]
pub struct EncoderWeights<A: Scalar> {
    pub arrays: Vec<(String, Tensor<A>)>,
    pub frozen: bool,
}

impl<A: Scalar> EncoderWeights<A> {
    pub fn checksum(&self) -> [u8; 32] {
        let refs: Vec<(String, &Tensor<A>)> =
            self.arrays.iter().map(|(n, t)| (n.clone(), t)).collect();
        named_checksum(&refs)
    }
}

/// Reference visual encoder: non-overlapping patch means, one hidden
/// linear layer with tanh, linear projection to the joint space.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualEncoder<A: Scalar> {
    pub config: JointSpaceConfig,
    pub patch: usize,
    pub(crate) hidden: Linear<A>,
    pub(crate) out: Linear<A>,
}

impl<A: Scalar> VisualEncoder<A> {
    pub fn input_dim(&self) -> usize {
        let (h, w) = self.config.image_size;
        3 * (h / self.patch) * (w / self.patch)
    }

    fn validate_image(&self, image: &Tensor<A>) -> Result<()> {
        let (h, w) = self.config.image_size;
        if image.shape() != [3, h, w] {
            return Err(Error::Config(format!(
                "image shape {:?} does not match configured size [3, {h}, {w}]",
                image.shape()
            )));
        }
        if !image.all_finite() {
            return Err(Error::Input("image contains non-finite pixels".into()));
        }
        Ok(())
    }

    /// Encode an image to a d-dimensional feature vector.
    pub fn encode_image(&self, image: &Tensor<A>) -> Result<Tensor<A>> {
        self.validate_image(image)?;
        let tape = Tape::new();
        let x = tape.leaf(image.clone());
        Ok(self.bind(&tape).forward(x).value())
    }

    pub fn bind<'t>(&self, tape: &'t Tape<A>) -> BoundVisualEncoder<'t, A> {
        BoundVisualEncoder {
            patch: self.patch,
            hidden: self.hidden.bind(tape),
            out: self.out.bind(tape),
        }
    }

    pub fn named_arrays(&self) -> Vec<(String, Tensor<A>)> {
        vec![
            ("visual.hidden.weight".into(), self.hidden.weight.clone()),
            ("visual.hidden.bias".into(), self.hidden.bias.clone()),
            ("visual.out.weight".into(), self.out.weight.clone()),
            ("visual.out.bias".into(), self.out.bias.clone()),
        ]
    }
}

pub struct BoundVisualEncoder<'t, A: Scalar> {
    patch: usize,
    hidden: BoundLinear<'t, A>,
    out: BoundLinear<'t, A>,
}

impl<'t, A: Scalar> BoundVisualEncoder<'t, A> {
    pub fn forward(&self, image: Var<'t, A>) -> Var<'t, A> {
        let patches = image.patch_mean(self.patch);
        self.out.forward(self.hidden.forward(patches).tanh())
    }
}

/// Reference text encoder: token-embedding rows plus positional rows,
/// mean pooling over the sequence, linear projection to the joint space.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder<A: Scalar> {
    pub config: JointSpaceConfig,
    /// `[vocab_size, token_embedding_dim]` embedding table.
    pub(crate) embedding: Tensor<A>,
    pub(crate) positional: Tensor<A>,
    pub(crate) proj: Linear<A>,
}

impl<A: Scalar> TextEncoder<A> {
    pub fn vocab_size(&self) -> usize {
        self.embedding.shape()[0]
    }

    pub fn embedding_table(&self) -> &Tensor<A> {
        &self.embedding
    }

    /// Replace one embedding row. Only valid before the encoder is frozen
    /// into a training run; used by the synthetic vocabulary calibration.
    pub fn set_embedding_row(&mut self, row: usize, values: &[A]) {
        let e = self.config.token_embedding_dim;
        assert_eq!(values.len(), e);
        self.embedding.data_mut()[row * e..(row + 1) * e].copy_from_slice(values);
    }

    /// Encode a `[L, token_embedding_dim]` embedding sequence to a feature.
    pub fn encode_token_sequence(&self, rows: &Tensor<A>) -> Result<Tensor<A>> {
        self.validate_sequence(rows)?;
        let tape = Tape::new();
        let x = tape.leaf(rows.clone());
        Ok(self.bind(&tape).forward(x).value())
    }

    pub fn validate_sequence(&self, rows: &Tensor<A>) -> Result<()> {
        if rows.shape().len() != 2 || rows.shape()[1] != self.config.token_embedding_dim {
            return Err(Error::Input(format!(
                "sequence shape {:?} does not match token embedding dim {}",
                rows.shape(),
                self.config.token_embedding_dim
            )));
        }
        if rows.shape()[0] > self.config.max_sequence_length {
            return Err(Error::Input(format!(
                "sequence length {} exceeds max {}",
                rows.shape()[0],
                self.config.max_sequence_length
            )));
        }
        Ok(())
    }

    pub fn bind<'t>(&self, tape: &'t Tape<A>) -> BoundTextEncoder<'t, A> {
        BoundTextEncoder {
            positional: self.positional.clone(),
            proj: self.proj.bind(tape),
            tape_positional: None.into(),
        }
    }

    pub fn named_arrays(&self) -> Vec<(String, Tensor<A>)> {
        vec![
            ("text.embedding".into(), self.embedding.clone()),
            ("text.positional".into(), self.positional.clone()),
            ("text.proj.weight".into(), self.proj.weight.clone()),
            ("text.proj.bias".into(), self.proj.bias.clone()),
        ]
    }
}

pub struct BoundTextEncoder<'t, A: Scalar> {
    positional: Tensor<A>,
    proj: BoundLinear<'t, A>,
    tape_positional: std::cell::RefCell<Option<(usize, Var<'t, A>)>>,
}

impl<'t, A: Scalar> BoundTextEncoder<'t, A> {
    /// `rows` is a `[L, e]` var; returns the `[d]` text feature.
    pub fn forward(&self, rows: Var<'t, A>) -> Var<'t, A> {
        let len = rows.shape()[0];
        let e = rows.shape()[1];
        let pos = {
            let mut cached = self.tape_positional.borrow_mut();
            match &*cached {
                Some((l, v)) if *l == len => *v,
                _ => {
                    let slice = Tensor::new(
                        vec![len, e],
                        self.positional.data()[..len * e].to_vec(),
                    );
                    // positional rows are frozen; a plain leaf is fine
                    let v = rows.tape().leaf(slice);
                    *cached = Some((len, v));
                    v
                }
            }
        };
        self.proj.forward(rows.add(pos).mean_axis0())
    }
}

/// Build the seeded, frozen reference encoder pair.
pub fn build_reference_encoders<A: Scalar>(
    seed: u64,
    config: &JointSpaceConfig,
    vocab_size: usize,
) -> Result<(VisualEncoder<A>, TextEncoder<A>)> {
    config.validate()?;
    let (h, w) = config.image_size;
    let patch = 16;
    if h % patch != 0 || w % patch != 0 {
        return Err(Error::Config(format!(
            "image size {h}x{w} must be divisible by patch size {patch}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let in_dim = 3 * (h / patch) * (w / patch);
    // When the joint space is no wider than the patch space, build the two
    // layers as a near-isometry: hidden = tanh(g * Q^T x) with g small
    // enough that tanh stays in its linear range, and the output layer
    // undoes g and applies an orthonormal map R. The composition is
    // R Q Q^T = R up to a relative error of order g^2, so feature-space
    // inner products faithfully mirror patch-space inner products.
    let visual = if config.feature_dim <= in_dim {
        let hidden_dim = in_dim.max(2 * config.feature_dim);
        let g = 0.05;
        let q = orthogonal_tensor::<A>(&mut rng, in_dim, hidden_dim, 1.0);
        let r = orthogonal_tensor::<A>(&mut rng, config.feature_dim, in_dim, 1.0);
        VisualEncoder {
            config: config.clone(),
            patch,
            hidden: Linear {
                weight: q.transpose2().scale(A::from_f64_(g)),
                bias: Tensor::zeros(&[hidden_dim]),
            },
            out: Linear {
                weight: r.matmul(&q).scale(A::from_f64_(1.0 / g)),
                bias: Tensor::zeros(&[config.feature_dim]),
            },
        }
    } else {
        let hidden_dim = 2 * config.feature_dim;
        VisualEncoder {
            config: config.clone(),
            patch,
            hidden: Linear::seeded(&mut rng, in_dim, hidden_dim),
            out: Linear::seeded(&mut rng, hidden_dim, config.feature_dim),
        }
    };
    let e = config.token_embedding_dim;
    let embedding = fan_in_tensor(&mut rng, &[vocab_size, e], e);
    let positional = fan_in_tensor(&mut rng, &[config.max_sequence_length, e], e);
    let proj = if config.feature_dim <= e {
        Linear {
            weight: orthogonal_tensor(&mut rng, config.feature_dim, e, 1.0),
            bias: Tensor::zeros(&[config.feature_dim]),
        }
    } else {
        Linear::seeded(&mut rng, e, config.feature_dim)
    };
    let text = TextEncoder {
        config: config.clone(),
        embedding,
        positional,
        proj,
    };
    Ok((visual, text))
}

/// Combined named arrays of an encoder pair, plus shape metadata needed to
/// reconstruct them from a checkpoint container.
pub fn encoders_to_arrays<A: Scalar>(
    visual: &VisualEncoder<A>,
    text: &TextEncoder<A>,
) -> Vec<(String, Tensor<A>)> {
    let (h, w) = visual.config.image_size;
    let meta = Tensor::new(
        vec![7],
        [
            visual.config.feature_dim,
            visual.config.token_embedding_dim,
            visual.config.max_sequence_length,
            h,
            w,
            visual.patch,
            text.vocab_size(),
        ]
        .iter()
        .map(|&x| A::from_usize_(x))
        .collect(),
    );
    let mut arrays = vec![("meta".to_string(), meta)];
    arrays.extend(visual.named_arrays());
    arrays.extend(text.named_arrays());
    arrays
}

fn take_array<A: Scalar>(
    arrays: &mut Vec<(String, Tensor<A>)>,
    name: &str,
) -> Result<Tensor<A>> {
    let pos = arrays
        .iter()
        .position(|(n, _)| n == name)
        .ok_or_else(|| Error::Load(format!("missing array {name:?}")))?;
    Ok(arrays.remove(pos).1)
}

/// Rebuild an encoder pair from named arrays (see [`encoders_to_arrays`]).
pub fn encoders_from_arrays<A: Scalar>(
    mut arrays: Vec<(String, Tensor<A>)>,
) -> Result<(VisualEncoder<A>, TextEncoder<A>)> {
    let meta = take_array(&mut arrays, "meta")?;
    if meta.len() != 7 {
        return Err(Error::Load("array \"meta\" has unexpected length".into()));
    }
    let m: Vec<usize> = meta.data().iter().map(|x| x.to_f64_() as usize).collect();
    let config = JointSpaceConfig {
        feature_dim: m[0],
        token_embedding_dim: m[1],
        max_sequence_length: m[2],
        image_size: (m[3], m[4]),
    };
    config.validate()?;
    let patch = m[5];
    let vocab_size = m[6];

    let linear = |prefix: &str, arrays: &mut Vec<(String, Tensor<A>)>| -> Result<Linear<A>> {
        Ok(Linear {
            weight: take_array(arrays, &format!("{prefix}.weight"))?,
            bias: take_array(arrays, &format!("{prefix}.bias"))?,
        })
    };
    let visual = VisualEncoder {
        config: config.clone(),
        patch,
        hidden: linear("visual.hidden", &mut arrays)?,
        out: linear("visual.out", &mut arrays)?,
    };
    let embedding = take_array(&mut arrays, "text.embedding")?;
    if embedding.shape() != [vocab_size, config.token_embedding_dim] {
        return Err(Error::Load(format!(
            "array \"text.embedding\" has shape {:?}, expected [{}, {}]",
            embedding.shape(),
            vocab_size,
            config.token_embedding_dim
        )));
    }
    let text = TextEncoder {
        config,
        embedding,
        positional: take_array(&mut arrays, "text.positional")?,
        proj: linear("text.proj", &mut arrays)?,
    };
    Ok((visual, text))
}
