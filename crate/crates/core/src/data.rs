//! Synthetic multi-channel dataset and the MCIF on-disk image format.
//!
//! The generator is built so the label cannot be read off any single
//! channel: two designated channels carry oriented gratings whose
//! attributes sum to the label modulo the class count, a texture
//! channel shows the label's texture only with limited fidelity, and
//! the remaining channels are pure distractors. A classifier must
//! combine the designated pair to be exact.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, McifError, Result};
use crate::seeds::{derive_seed, Stream};
use crate::tokenizer::MultiChannelImage;

/// Stripe period of the gratings in pixels.
pub const GRATING_PERIOD: usize = 8;

/// Direction vectors of the renderable attributes; the class count is
/// capped by this table.
const DIRS: [(i64, i64); 4] = [(0, 1), (1, 0), (1, 1), (1, -1)];
/// Per attribute, the direction along which its grating is constant.
const FLAT_DIRS: [(i64, i64); 4] = [(1, 0), (0, 1), (1, -1), (1, 1)];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub num_classes: usize,
    /// Channel columns carrying the modular label signal.
    pub pair: (usize, usize),
    /// Channel column showing the per-class texture.
    pub texture_channel: usize,
    /// Probability the texture channel shows the true class texture.
    #[serde(default = "default_fidelity")]
    pub texture_fidelity: f64,
    pub noise_sigma: f32,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
}

fn default_fidelity() -> f64 {
    0.55
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            h: 32,
            w: 32,
            c: 4,
            num_classes: 3,
            pair: (0, 1),
            texture_channel: 2,
            texture_fidelity: default_fidelity(),
            noise_sigma: 0.0,
            train: 2048,
            val: 512,
            test: 512,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > DIRS.len() {
            return Err(Error::Config(format!(
                "num_classes {} outside supported range 2..={}",
                self.num_classes,
                DIRS.len()
            )));
        }
        let (a, b) = self.pair;
        if a == b || a >= self.c || b >= self.c {
            return Err(Error::Config("pair must be two distinct channels".into()));
        }
        if self.texture_channel >= self.c || self.texture_channel == a || self.texture_channel == b
        {
            return Err(Error::Config(
                "texture channel must be distinct from the pair".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.texture_fidelity) {
            return Err(Error::Config("texture_fidelity must lie in [0,1]".into()));
        }
        if self.h < GRATING_PERIOD || self.w < GRATING_PERIOD {
            return Err(Error::Config(format!(
                "image sides must be >= grating period {GRATING_PERIOD}"
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("noise_sigma must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn channel_ids(&self) -> Vec<u16> {
        (0..self.c as u16).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub image: MultiChannelImage,
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct DatasetSplits {
    pub train: Vec<LabeledSample>,
    pub val: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
}

fn square_wave(u: i64) -> f32 {
    if u.rem_euclid(GRATING_PERIOD as i64) < (GRATING_PERIOD / 2) as i64 {
        1.0
    } else {
        0.0
    }
}

fn render_grating(img: &mut MultiChannelImage, channel: usize, attr: usize, phase: i64) {
    let (dx, dy) = DIRS[attr];
    for y in 0..img.h {
        for x in 0..img.w {
            let u = dx * x as i64 + dy * y as i64 + phase;
            img.set(x, y, channel, square_wave(u));
        }
    }
}

/// Attributes rendered into each channel of one sample. Exposed so the
/// rule oracles in tests can be checked against the generating truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTruth {
    pub label: usize,
    pub attrs: Vec<usize>,
}

fn render_sample(
    spec: &SynthSpec,
    split: u64,
    idx: u64,
    label: usize,
) -> (LabeledSample, SampleTruth) {
    let k = spec.num_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        spec.seed,
        Stream::SampleRender,
        split.wrapping_mul(1 << 32) | idx,
    ));
    // fixed draw order: pair attribute, texture attribute, distractors
    let a = rng.random_range(0..k);
    let b = (label + k - a) % k;
    let texture = if rng.random_range(0.0..1.0) < spec.texture_fidelity {
        label
    } else {
        let other = rng.random_range(0..k - 1);
        if other >= label {
            other + 1
        } else {
            other
        }
    };
    let mut attrs = vec![0usize; spec.c];
    for (j, slot) in attrs.iter_mut().enumerate() {
        *slot = if j == spec.pair.0 {
            a
        } else if j == spec.pair.1 {
            b
        } else if j == spec.texture_channel {
            texture
        } else {
            rng.random_range(0..k)
        };
    }
    let mut image = MultiChannelImage::zeros(spec.h, spec.w, spec.channel_ids());
    for (j, &attr) in attrs.iter().enumerate() {
        let phase = rng.random_range(0..GRATING_PERIOD as i64);
        render_grating(&mut image, j, attr, phase);
    }
    if spec.noise_sigma > 0.0 {
        for px in image.pixels_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *px += spec.noise_sigma * z as f32;
        }
    }
    (LabeledSample { image, label }, SampleTruth { label, attrs })
}

fn balanced_labels(spec: &SynthSpec, split: u64, count: usize) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..count).map(|i| i % spec.num_classes).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, Stream::LabelDeck, split));
    labels.shuffle(&mut rng);
    labels
}

fn generate_split(spec: &SynthSpec, split: u64, count: usize) -> Vec<LabeledSample> {
    balanced_labels(spec, split, count)
        .into_iter()
        .enumerate()
        .map(|(idx, label)| render_sample(spec, split, idx as u64, label).0)
        .collect()
}

/// Generate train/val/test splits, deterministic under the spec's seed.
pub fn generate(spec: &SynthSpec) -> Result<DatasetSplits> {
    spec.validate()?;
    Ok(DatasetSplits {
        train: generate_split(spec, 0, spec.train),
        val: generate_split(spec, 1, spec.val),
        test: generate_split(spec, 2, spec.test),
    })
}

// ---- rule oracles ----

/// Recover a channel's rendered attribute by finding the direction
/// along which the grating is constant. Exact at zero noise.
pub fn channel_attribute(image: &MultiChannelImage, channel: usize, num_classes: usize) -> usize {
    let mut best = 0usize;
    let mut best_v = f64::INFINITY;
    for (attr, &(dx, dy)) in FLAT_DIRS.iter().enumerate().take(num_classes) {
        let mut v = 0.0f64;
        for y in 0..image.h {
            for x in 0..image.w {
                let nx = x as i64 + dx;
                let ny = y as i64 + dy;
                if nx < 0 || ny < 0 || nx >= image.w as i64 || ny >= image.h as i64 {
                    continue;
                }
                let diff = image.get(nx as usize, ny as usize, channel) - image.get(x, y, channel);
                v += (diff as f64).abs();
            }
        }
        if v < best_v {
            best_v = v;
            best = attr;
        }
    }
    best
}

/// Accuracy of the rule that reads both designated channels and sums
/// their attributes modulo the class count.
pub fn pair_oracle_accuracy(samples: &[LabeledSample], spec: &SynthSpec) -> f64 {
    let k = spec.num_classes;
    let correct = samples
        .iter()
        .filter(|s| {
            let a = channel_attribute(&s.image, spec.pair.0, k);
            let b = channel_attribute(&s.image, spec.pair.1, k);
            (a + b) % k == s.label
        })
        .count();
    correct as f64 / samples.len() as f64
}

/// Best achievable accuracy of any classifier that reads one channel's
/// attribute: exhaustive search over attribute-to-label rules, i.e. the
/// majority label per observed attribute value.
pub fn single_channel_oracle_accuracy(
    samples: &[LabeledSample],
    channel: usize,
    num_classes: usize,
) -> f64 {
    let mut counts = vec![vec![0usize; num_classes]; num_classes];
    for s in samples {
        let attr = channel_attribute(&s.image, channel, num_classes);
        counts[attr][s.label] += 1;
    }
    let best: usize = counts
        .iter()
        .map(|row| row.iter().copied().max().unwrap_or(0))
        .sum();
    best as f64 / samples.len() as f64
}

pub fn label_histogram(samples: &[LabeledSample], num_classes: usize) -> Vec<usize> {
    let mut hist = vec![0usize; num_classes];
    for s in samples {
        hist[s.label] += 1;
    }
    hist
}

// ---- MCIF container ----

const MCIF_MAGIC: &[u8; 4] = b"MCIF";
const MCIF_VERSION: u8 = 1;
const FLAG_HAS_LABEL: u8 = 0b0000_0001;

/// Serialize an image (and optional label) to MCIF bytes:
/// magic "MCIF", u8 version, u8 flags, u16 h, u16 w, u16 c, then c
/// little-endian u16 channel ids, then h*w*c little-endian f32 pixels in
/// channel-major row-major order, then an optional trailing u16 label.
pub fn mcif_to_bytes(image: &MultiChannelImage, label: Option<u16>) -> Result<Vec<u8>> {
    let c = image.num_channels();
    if image.h > u16::MAX as usize || image.w > u16::MAX as usize || c > u16::MAX as usize {
        return Err(Error::Config("image too large for MCIF header".into()));
    }
    let mut out = Vec::with_capacity(10 + 2 * c + 4 * image.pixels().len() + 2);
    out.extend_from_slice(MCIF_MAGIC);
    out.push(MCIF_VERSION);
    out.push(if label.is_some() { FLAG_HAS_LABEL } else { 0 });
    out.extend_from_slice(&(image.h as u16).to_le_bytes());
    out.extend_from_slice(&(image.w as u16).to_le_bytes());
    out.extend_from_slice(&(c as u16).to_le_bytes());
    for &id in &image.channel_ids {
        out.extend_from_slice(&id.to_le_bytes());
    }
    for &px in image.pixels() {
        out.extend_from_slice(&px.to_le_bytes());
    }
    if let Some(l) = label {
        out.extend_from_slice(&l.to_le_bytes());
    }
    Ok(out)
}

/// Parse MCIF bytes; strict about truncation and trailing garbage.
pub fn mcif_from_bytes(bytes: &[u8]) -> Result<(MultiChannelImage, Option<u16>)> {
    let need = |wanted: usize, have: usize| -> Result<()> {
        if wanted > have {
            Err(McifError::Truncated {
                wanted: wanted - have,
            }
            .into())
        } else {
            Ok(())
        }
    };
    need(10, bytes.len())?;
    if &bytes[0..4] != MCIF_MAGIC {
        return Err(McifError::BadMagic.into());
    }
    if bytes[4] != MCIF_VERSION {
        return Err(McifError::BadVersion(bytes[4]).into());
    }
    let flags = bytes[5];
    let h = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let w = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let c = u16::from_le_bytes([bytes[10], bytes[11]]) as usize;
    // header is 12 bytes with the c field; recheck base length
    need(12, bytes.len())?;
    if c == 0 {
        return Err(McifError::ChannelCount {
            header: 0,
            found: 0,
        }
        .into());
    }
    let ids_end = 12 + 2 * c;
    need(ids_end, bytes.len())?;
    let mut channel_ids = Vec::with_capacity(c);
    for j in 0..c {
        let off = 12 + 2 * j;
        let id = u16::from_le_bytes([bytes[off], bytes[off + 1]]);
        if channel_ids.contains(&id) {
            return Err(McifError::DuplicateChannel(id).into());
        }
        channel_ids.push(id);
    }
    let px_count = h * w * c;
    let px_end = ids_end + 4 * px_count;
    need(px_end, bytes.len())?;
    let mut pixels = Vec::with_capacity(px_count);
    for i in 0..px_count {
        let off = ids_end + 4 * i;
        pixels.push(f32::from_le_bytes([
            bytes[off],
            bytes[off + 1],
            bytes[off + 2],
            bytes[off + 3],
        ]));
    }
    let (label, expected_len) = if flags & FLAG_HAS_LABEL != 0 {
        need(px_end + 2, bytes.len())?;
        (
            Some(u16::from_le_bytes([bytes[px_end], bytes[px_end + 1]])),
            px_end + 2,
        )
    } else {
        (None, px_end)
    };
    if bytes.len() != expected_len {
        return Err(McifError::TrailingBytes.into());
    }
    let image = MultiChannelImage::new(h, w, channel_ids, pixels)?;
    Ok((image, label))
}

pub fn save_mcif(
    path: &std::path::Path,
    image: &MultiChannelImage,
    label: Option<u16>,
) -> Result<()> {
    std::fs::write(path, mcif_to_bytes(image, label)?)?;
    Ok(())
}

pub fn load_mcif(path: &std::path::Path) -> Result<(MultiChannelImage, Option<u16>)> {
    mcif_from_bytes(&std::fs::read(path)?)
}
