//! Synthetic re-identification dataset: identities are tuples of five
//! region colors rendered into figure images across cameras with
//! brightness and background variation, plus a handcrafted color-ratio
//! feature extractor that serves as an independent victim model.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::SurrogateModel;
use crate::autodiff::{concat_scalars, mean_scalars, Tape, Var};
use crate::encoders::{TextEncoder, VisualEncoder};
use crate::error::{Error, Result};
use crate::imageio::{load_png, save_png};
use crate::interpret::{AttributeVocabulary, AttributeWords};
use crate::metrics::RetrievalItem;
use crate::nn::orthogonal_tensor;
use crate::prompt::{Vocabulary, DEFAULT_ATTRIBUTE_NAMES};
use crate::scalar::Scalar;
use crate::tensor::{named_checksum, Tensor};

pub const ATTRIBUTE_COUNT: usize = 5;

/// Per-attribute color palettes. Words are globally unique so a ranked
/// word list identifies both the attribute and its value.
///
/// Each palette is a regular hexagon in the chromatic plane orthogonal to
/// (1,1,1): six equally-spaced, equally-bright colors around a per-attribute
/// gray base. Equal brightness keeps the centered color directions
/// orthogonal to the base gray, and equal radii make the ground-truth color
/// the unique cosine argmax under the calibrated word embeddings.
pub const PALETTES: [&[(&str, [f64; 3])]; ATTRIBUTE_COUNT] = [
    // top: base 0.55, radius 0.22
    &[
        ("red", [0.7056, 0.3944, 0.5500]),
        ("orange", [0.7056, 0.5500, 0.3944]),
        ("yellow", [0.5500, 0.7056, 0.3944]),
        ("teal", [0.3944, 0.7056, 0.5500]),
        ("violet", [0.3944, 0.5500, 0.7056]),
        ("white", [0.5500, 0.3944, 0.7056]),
    ],
    // underneath: base 0.40, radius 0.22
    &[
        ("blue", [0.5750, 0.2775, 0.3475]),
        ("navy", [0.5225, 0.4525, 0.2250]),
        ("cyan", [0.3475, 0.5750, 0.2775]),
        ("olive", [0.2250, 0.5225, 0.4525]),
        ("magenta", [0.2775, 0.3475, 0.5750]),
        ("black", [0.4525, 0.2250, 0.5225]),
    ],
    // hairstyle: base 0.60, radius 0.22
    &[
        ("blond", [0.7763, 0.5415, 0.4822]),
        ("brown", [0.6585, 0.7178, 0.4237]),
        ("gray", [0.4822, 0.7763, 0.5415]),
        ("auburn", [0.4237, 0.6585, 0.7178]),
        ("ginger", [0.5415, 0.4822, 0.7763]),
        ("dark", [0.7178, 0.4237, 0.6585]),
    ],
    // shoes: base 0.45, radius 0.22
    &[
        ("green", [0.5935, 0.4719, 0.2847]),
        ("tan", [0.4281, 0.6153, 0.3065]),
        ("pink", [0.2847, 0.5935, 0.4719]),
        ("maroon", [0.3065, 0.4281, 0.6153]),
        ("silver", [0.4719, 0.2847, 0.5935]),
        ("gold", [0.6153, 0.3065, 0.4281]),
    ],
    // carrying: base 0.50, radius 0.22
    &[
        ("purple", [0.6081, 0.5702, 0.3217]),
        ("beige", [0.4298, 0.6783, 0.3919]),
        ("khaki", [0.3217, 0.6081, 0.5702]),
        ("coral", [0.3919, 0.4298, 0.6783]),
        ("mint", [0.5702, 0.3217, 0.6081]),
        ("charcoal", [0.6783, 0.3919, 0.4298]),
    ],
];

/// All palette words, attribute by attribute.
pub fn all_color_words() -> Vec<String> {
    PALETTES
        .iter()
        .flat_map(|p| p.iter().map(|(w, _)| w.to_string()))
        .collect()
}

/// RGB of a palette word within one attribute.
pub fn color_of(attribute: usize, word: &str) -> Option<[f64; 3]> {
    PALETTES
        .get(attribute)?
        .iter()
        .find(|(w, _)| *w == word)
        .map(|(_, c)| *c)
}

/// The candidate lists used for interpretation, one per attribute.
pub fn attribute_vocabulary() -> AttributeVocabulary {
    AttributeVocabulary {
        attributes: DEFAULT_ATTRIBUTE_NAMES
            .iter()
            .zip(PALETTES.iter())
            .map(|(name, palette)| AttributeWords {
                name: name.to_string(),
                words: palette.iter().map(|(w, _)| w.to_string()).collect(),
            })
            .collect(),
    }
}

/// Region rectangle of one attribute as (row0, row1, col0, col1),
/// half-open, for an image of the given size.
///
/// Every edge sits on a multiple of h/8 or w/4, so at the canonical
/// 128x64 size each region tiles whole 16x16 patches of the reference
/// visual encoder and no patch mixes two attribute colors.
pub fn region_rect(attribute: usize, h: usize, w: usize) -> (usize, usize, usize, usize) {
    let r = |num: usize, den: usize, total: usize| num * total / den;
    match attribute {
        // top: torso
        0 => (r(1, 8, h), r(1, 2, h), r(1, 4, w), r(3, 4, w)),
        // underneath: legs
        1 => (r(1, 2, h), r(7, 8, h), r(1, 4, w), r(3, 4, w)),
        // hairstyle: head band across the full width
        2 => (0, r(1, 8, h), 0, w),
        // shoes: foot band across the full width
        3 => (r(7, 8, h), h, 0, w),
        // carrying: bag strip on the left edge
        4 => (r(1, 4, h), r(3, 4, h), 0, r(1, 4, w)),
        _ => panic!("attribute index out of range"),
    }
}

/// One identity's appearance, as palette words per attribute in the
/// order of [`DEFAULT_ATTRIBUTE_NAMES`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeTuple {
    pub top: String,
    pub underneath: String,
    pub hairstyle: String,
    pub shoes: String,
    pub carrying: String,
}

impl AttributeTuple {
    pub fn word(&self, attribute: usize) -> &str {
        match attribute {
            0 => &self.top,
            1 => &self.underneath,
            2 => &self.hairstyle,
            3 => &self.shoes,
            4 => &self.carrying,
            _ => panic!("attribute index out of range"),
        }
    }

    fn from_indices(idx: [usize; ATTRIBUTE_COUNT]) -> Self {
        let w = |a: usize| PALETTES[a][idx[a]].0.to_string();
        Self {
            top: w(0),
            underneath: w(1),
            hairstyle: w(2),
            shoes: w(3),
            carrying: w(4),
        }
    }
}

/// Synthetic dataset parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub identities: usize,
    pub cameras: usize,
    /// Images per identity per camera.
    pub images_per_camera: usize,
    pub height: usize,
    pub width: usize,
    /// Amplitude of per-pixel uniform noise.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            identities: 8,
            cameras: 3,
            images_per_camera: 2,
            height: 128,
            width: 64,
            jitter: 0.02,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.identities == 0 || self.cameras == 0 || self.images_per_camera == 0 {
            return Err(Error::Config("dataset counts must be nonzero".into()));
        }
        if self.height < 16 || self.width < 8 {
            return Err(Error::Config("image size too small for the region layout".into()));
        }
        if !(0.0..0.2).contains(&self.jitter) {
            return Err(Error::Config("jitter must lie in [0, 0.2)".into()));
        }
        let max_tuples: usize = PALETTES.iter().map(|p| p.len()).product();
        if self.identities > max_tuples {
            return Err(Error::Config(format!(
                "at most {max_tuples} distinct identities are possible"
            )));
        }
        Ok(())
    }
}

/// In-memory labelled dataset.
#[derive(Debug, Clone)]
pub struct SyntheticDataset<A: Scalar> {
    pub images: Vec<Tensor<A>>,
    pub items: Vec<RetrievalItem>,
    pub filenames: Vec<String>,
    /// Identity -> appearance tuple; empty when loaded from a folder
    /// without an attributes file.
    pub attributes: BTreeMap<u32, AttributeTuple>,
}

impl<A: Scalar> SyntheticDataset<A> {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn pids(&self) -> Vec<u32> {
        self.items.iter().map(|m| m.pid).collect()
    }

    /// Query = camera 0, gallery = all other cameras.
    pub fn query_gallery_split(&self) -> (Vec<usize>, Vec<usize>) {
        let mut q = Vec::new();
        let mut g = Vec::new();
        for (i, m) in self.items.iter().enumerate() {
            if m.camid == 0 {
                q.push(i);
            } else {
                g.push(i);
            }
        }
        (q, g)
    }
}

fn camera_brightness(camid: u32) -> f64 {
    if camid == 0 {
        1.0
    } else {
        // Deterministic per-camera factor in [0.9, 1.1].
        0.9 + 0.2 * ((camid as f64 * 0.37).fract())
    }
}

fn camera_background(camid: u32) -> [f64; 3] {
    let base = 0.30;
    if camid == 0 {
        [base; 3]
    } else {
        let t = camid as f64;
        [
            base + 0.05 * (t * 0.61).fract() - 0.025,
            base + 0.05 * (t * 0.29).fract() - 0.025,
            base + 0.05 * (t * 0.83).fract() - 0.025,
        ]
    }
}

fn paint_rect<A: Scalar>(img: &mut Tensor<A>, rect: (usize, usize, usize, usize), rgb: [f64; 3]) {
    let (r0, r1, c0, c1) = rect;
    for c in 0..3 {
        for y in r0..r1 {
            for x in c0..c1 {
                img.set3(c, y, x, A::from_f64_(rgb[c]));
            }
        }
    }
}

/// Render one image of an identity under a camera. The same rng stream
/// drives only the pixel jitter.
pub fn render_image<A: Scalar>(
    tuple: &AttributeTuple,
    camid: u32,
    h: usize,
    w: usize,
    jitter: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<A>> {
    let mut img: Tensor<A> = Tensor::zeros(&[3, h, w]);
    paint_rect(&mut img, (0, h, 0, w), camera_background(camid));
    for a in 0..ATTRIBUTE_COUNT {
        let word = tuple.word(a);
        let rgb = color_of(a, word)
            .ok_or_else(|| Error::Input(format!("'{word}' is not a palette word")))?;
        paint_rect(&mut img, region_rect(a, h, w), rgb);
    }
    let bright = camera_brightness(camid);
    for v in img.data_mut() {
        let noise = if jitter > 0.0 {
            rng.gen_range(-jitter..=jitter)
        } else {
            0.0
        };
        *v = A::from_f64_(((*v).to_f64_() * bright + noise).clamp(0.0, 1.0));
    }
    Ok(img)
}

/// Neutral probe image (camera 0, no jitter) whose attribute `attribute`
/// is set to the palette color `color_idx`; every other region takes its
/// palette's first color.
pub fn probe_image<A: Scalar>(
    attribute: usize,
    color_idx: usize,
    h: usize,
    w: usize,
) -> Result<Tensor<A>> {
    let mut idx = [0usize; ATTRIBUTE_COUNT];
    idx[attribute] = color_idx;
    let tuple = AttributeTuple::from_indices(idx);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    render_image(&tuple, 0, h, w, 0.0, &mut rng)
}

/// Generate the full dataset in memory. Identity tuples are sampled
/// without repetition so every identity is separable by appearance.
pub fn generate_dataset<A: Scalar>(spec: &SyntheticSpec) -> Result<SyntheticDataset<A>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut seen = std::collections::BTreeSet::new();
    let mut attributes = BTreeMap::new();
    for pid in 1..=spec.identities as u32 {
        loop {
            let mut idx = [0usize; ATTRIBUTE_COUNT];
            for (a, slot) in idx.iter_mut().enumerate() {
                *slot = rng.gen_range(0..PALETTES[a].len());
            }
            if seen.insert(idx) {
                attributes.insert(pid, AttributeTuple::from_indices(idx));
                break;
            }
        }
    }
    let mut images = Vec::new();
    let mut items = Vec::new();
    let mut filenames = Vec::new();
    for (&pid, tuple) in &attributes {
        for cam in 0..spec.cameras as u32 {
            for seq in 0..spec.images_per_camera {
                images.push(render_image(
                    tuple,
                    cam,
                    spec.height,
                    spec.width,
                    spec.jitter,
                    &mut rng,
                )?);
                items.push(RetrievalItem { pid, camid: cam });
                filenames.push(format!("{pid:04}_c{cam}_{seq:04}.png"));
            }
        }
    }
    Ok(SyntheticDataset { images, items, filenames, attributes })
}

/// Write the standard layout under `root`: every image into `train/`,
/// camera-0 images into `query/`, the rest into `gallery/`, and one
/// `attributes.json` manifest at the root.
pub fn write_dataset<A: Scalar>(ds: &SyntheticDataset<A>, root: &Path) -> Result<()> {
    for sub in ["train", "query", "gallery"] {
        std::fs::create_dir_all(root.join(sub))?;
    }
    for ((img, name), item) in ds.images.iter().zip(&ds.filenames).zip(&ds.items) {
        save_png(img, &root.join("train").join(name))?;
        let split = if item.camid == 0 { "query" } else { "gallery" };
        save_png(img, &root.join(split).join(name))?;
    }
    std::fs::write(
        root.join("attributes.json"),
        serde_json::to_string_pretty(&ds.attributes)?,
    )?;
    Ok(())
}

fn parse_reid_filename(name: &str) -> Result<RetrievalItem> {
    let stem = name
        .strip_suffix(".png")
        .ok_or_else(|| Error::Load(format!("'{name}' is not a .png file")))?;
    let parts: Vec<&str> = stem.split('_').collect();
    let bad = || Error::Load(format!("filename '{name}' is not PID_cCAM_SEQ.png"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let pid: u32 = parts[0].parse().map_err(|_| bad())?;
    let camid: u32 = parts[1].strip_prefix('c').ok_or_else(bad)?.parse().map_err(|_| bad())?;
    let _: u32 = parts[2].parse().map_err(|_| bad())?;
    Ok(RetrievalItem { pid, camid })
}

/// Load a folder of `PID_cCAM_SEQ.png` images, sorted by filename, plus
/// the `attributes.json` manifest from the folder or its parent when
/// present. Images are optionally bilinear-resized to a target size.
pub fn load_reid_folder_resized<A: Scalar>(
    dir: &Path,
    size: Option<(usize, usize)>,
) -> Result<SyntheticDataset<A>> {
    let mut names: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Load(format!("no .png images in {}", dir.display())));
    }
    let mut images = Vec::with_capacity(names.len());
    let mut items = Vec::with_capacity(names.len());
    for n in &names {
        items.push(parse_reid_filename(n)?);
        let mut img = load_png(&dir.join(n))?;
        if let Some((h, w)) = size {
            if img.shape() != [3, h, w] {
                img = crate::defenses::bilinear_resize(&img, h, w)?;
            }
        }
        images.push(img);
    }
    let attr_path = [dir.join("attributes.json")]
        .into_iter()
        .chain(dir.parent().map(|p| p.join("attributes.json")))
        .find(|p| p.exists());
    let attributes = match attr_path {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(&p)?)?,
        None => BTreeMap::new(),
    };
    Ok(SyntheticDataset { images, items, filenames: names, attributes })
}

/// [`load_reid_folder_resized`] at the images' natural size.
pub fn load_reid_folder<A: Scalar>(dir: &Path) -> Result<SyntheticDataset<A>> {
    load_reid_folder_resized(dir, None)
}

/// Period of the phase nonlinearity in brightness-ratio units. Small
/// enough that an 8/255 per-pixel shift of a region mean sweeps a large
/// part of one period (making the features locally steep, like a deep
/// network near its decision boundaries), while jitter-level noise moves
/// a phase by well under a percent of the period.
pub const PHASE_PERIOD: f64 = 0.125;

/// Handcrafted victim: the 15 region-channel means divided by their own
/// overall mean (canceling global brightness), passed through a sine
/// phase code, then mixed by a fixed random orthogonal projection.
pub struct HandcraftedExtractor<A: Scalar> {
    /// 15 masks of shape [3, H, W]; each sums to 1 over its region cell.
    masks: Vec<Tensor<A>>,
    /// Fixed [15, 15] orthogonal mixing matrix.
    projection: Tensor<A>,
    label: String,
    height: usize,
    width: usize,
}

impl<A: Scalar> HandcraftedExtractor<A> {
    pub fn new(height: usize, width: usize, seed: u64) -> Result<Self> {
        if height < 16 || width < 8 {
            return Err(Error::Config("image size too small for the region layout".into()));
        }
        let mut masks = Vec::with_capacity(3 * ATTRIBUTE_COUNT);
        for a in 0..ATTRIBUTE_COUNT {
            let (r0, r1, c0, c1) = region_rect(a, height, width);
            let count = A::from_usize_((r1 - r0) * (c1 - c0));
            for c in 0..3 {
                let mut m = Tensor::zeros(&[3, height, width]);
                for y in r0..r1 {
                    for x in c0..c1 {
                        m.set3(c, y, x, A::one() / count);
                    }
                }
                masks.push(m);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let projection = orthogonal_tensor(&mut rng, 15, 15, 1.0);
        Ok(Self {
            masks,
            projection,
            label: "handcrafted-color-ratio".to_string(),
            height,
            width,
        })
    }

    fn check_shape(&self, image: &Tensor<A>) -> Result<()> {
        if image.shape() != [3, self.height, self.width] {
            return Err(Error::Input(format!(
                "expected [3, {}, {}] image, got {:?}",
                self.height,
                self.width,
                image.shape()
            )));
        }
        Ok(())
    }
}

impl<A: Scalar> SurrogateModel<A> for HandcraftedExtractor<A> {
    fn name(&self) -> &str {
        &self.label
    }

    fn extract(&self, image: &Tensor<A>) -> Result<Tensor<A>> {
        self.check_shape(image)?;
        let tape = Tape::new();
        let x = tape.leaf(image.clone());
        let f = self.extract_var(&tape, x).value();
        if !f.all_finite() {
            return Err(Error::NonFinite("handcrafted feature".into()));
        }
        Ok(f)
    }

    fn extract_var<'t>(&self, tape: &'t Tape<A>, image: Var<'t, A>) -> Var<'t, A> {
        let means: Vec<Var<'t, A>> = self
            .masks
            .iter()
            .map(|m| image.dot(tape.leaf(m.clone())))
            .collect();
        let mu = mean_scalars(tape, &means);
        let ratios: Vec<Var<'t, A>> = means.iter().map(|m| m.div_scalar_var(mu)).collect();
        let r = concat_scalars(tape, &ratios);
        let omega = A::from_f64_(2.0 * std::f64::consts::PI / PHASE_PERIOD);
        let phases = r.scale(omega).sin();
        tape.leaf(self.projection.clone()).matvec(phases)
    }

    fn checksum(&self) -> [u8; 32] {
        let mut named: Vec<(String, &Tensor<A>)> = self
            .masks
            .iter()
            .enumerate()
            .map(|(i, m)| (format!("mask.{i}"), m))
            .collect();
        named.push(("projection".to_string(), &self.projection));
        named_checksum(&named)
    }
}

/// Calibrate the embedding rows of all palette words so that cosine
/// ranking in token space matches the visual evidence: each word's row
/// becomes the back-projected visual direction of its probe image
/// relative to its attribute's palette mean.
pub fn calibrate_color_embeddings<A: Scalar>(
    text: &mut TextEncoder<A>,
    vocab: &Vocabulary,
    visual: &VisualEncoder<A>,
    height: usize,
    width: usize,
) -> Result<()> {
    let proj_t = text.proj.weight.transpose2();
    let mut color_ids = Vec::new();
    let mut dirs: Vec<Tensor<A>> = Vec::new();
    for (a, palette) in PALETTES.iter().enumerate() {
        let feats: Vec<Tensor<A>> = (0..palette.len())
            .map(|ci| visual.encode_image(&probe_image::<A>(a, ci, height, width)?))
            .collect::<Result<_>>()?;
        let mut mean = Tensor::zeros(feats[0].shape());
        for f in &feats {
            mean = mean.add(f);
        }
        let mean = mean.scale(A::one() / A::from_usize_(feats.len()));
        for ((word, _), f) in palette.iter().zip(&feats) {
            let dir = proj_t.matvec(&f.sub(&mean));
            let row = dir.l2_normalized().map_err(|_| {
                Error::Normalization(format!("probe direction for '{word}' is zero"))
            })?;
            let id = vocab
                .id_of(word)
                .ok_or_else(|| Error::UnknownWord(word.to_string()))?;
            text.set_embedding_row(id as usize, row.data());
            color_ids.push(id as usize);
            dirs.push(row);
        }
    }

    // Orthogonalize the static prompt content (every non-palette embedding
    // row and all positional rows) against the span of the calibrated
    // directions. The static rows then contribute nothing along any color
    // direction, so the cosine ranking of a pseudo-token against the
    // palette words is driven by the image evidence alone.
    let mut basis: Vec<Tensor<A>> = Vec::new();
    for d in &dirs {
        let mut v = d.clone();
        for b in &basis {
            let c = v.dot(b);
            v = v.sub(&b.scale(c));
        }
        if v.norm().to_f64_() > 1e-9 {
            basis.push(v.l2_normalized()?);
        }
    }
    let project_out = |row: &mut [A], basis: &[Tensor<A>]| {
        for b in basis {
            let c: A = row.iter().zip(b.data()).map(|(&r, &x)| r * x).sum();
            for (r, &x) in row.iter_mut().zip(b.data()) {
                *r -= c * x;
            }
        }
    };
    let e = text.config.token_embedding_dim;
    for id in 0..text.vocab_size() {
        if color_ids.contains(&id) {
            continue;
        }
        let mut row = text.embedding_table().row(id).to_vec();
        project_out(&mut row, &basis);
        text.set_embedding_row(id, &row);
    }
    for p in 0..text.config.max_sequence_length {
        let mut row = text.positional.data()[p * e..(p + 1) * e].to_vec();
        project_out(&mut row, &basis);
        text.positional.data_mut()[p * e..(p + 1) * e].copy_from_slice(&row);
    }
    Ok(())
}
