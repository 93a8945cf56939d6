//! Image-to-token conversion: per-channel patchification through a
//! single shared projection, then assembly with CLS, memory, channel
//! and positional embeddings.
//!
//! Patch tokens are ordered channel-major: all `n` positions of the
//! first channel, then the second, giving slot index `j * n + i` for
//! position `i` of channel column `j`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numerics::{Scalar, Tape, Tensor, Var};

/// Multi-channel image: channel-major `c * h * w` f32 pixels plus the
/// semantic identity of each channel.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiChannelImage {
    pub h: usize,
    pub w: usize,
    pub channel_ids: Vec<u16>,
    pixels: Vec<f32>,
}

impl MultiChannelImage {
    pub fn new(h: usize, w: usize, channel_ids: Vec<u16>, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != h * w * channel_ids.len() {
            return Err(Error::ShapeMismatch(format!(
                "pixel count {} != {h}x{w}x{}",
                pixels.len(),
                channel_ids.len()
            )));
        }
        let mut seen = channel_ids.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != channel_ids.len() {
            return Err(Error::Config("duplicate channel ids in image".into()));
        }
        if pixels.iter().any(|x| !x.is_finite()) {
            return Err(Error::Config("non-finite pixel".into()));
        }
        Ok(Self {
            h,
            w,
            channel_ids,
            pixels,
        })
    }

    pub fn zeros(h: usize, w: usize, channel_ids: Vec<u16>) -> Self {
        let n = h * w * channel_ids.len();
        Self {
            h,
            w,
            channel_ids,
            pixels: vec![0.0; n],
        }
    }

    pub fn num_channels(&self) -> usize {
        self.channel_ids.len()
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    /// Plane of the j-th channel (by column index, not id).
    pub fn channel_plane(&self, j: usize) -> &[f32] {
        &self.pixels[j * self.h * self.w..(j + 1) * self.h * self.w]
    }

    pub fn get(&self, x: usize, y: usize, j: usize) -> f32 {
        self.pixels[j * self.h * self.w + y * self.w + x]
    }

    pub fn set(&mut self, x: usize, y: usize, j: usize, v: f32) {
        self.pixels[j * self.h * self.w + y * self.w + x] = v;
    }

    /// Sub-image containing only the requested channel ids, in the
    /// requested order. Used for partial-channel inference.
    pub fn select_channels(&self, subset: &[u16]) -> Result<Self> {
        if subset.is_empty() {
            return Err(Error::EmptySubset);
        }
        let mut pixels = Vec::with_capacity(self.h * self.w * subset.len());
        for &id in subset {
            let j = self
                .channel_ids
                .iter()
                .position(|&x| x == id)
                .ok_or(Error::UnknownChannel(id))?;
            pixels.extend_from_slice(self.channel_plane(j));
        }
        MultiChannelImage::new(self.h, self.w, subset.to_vec(), pixels)
    }

    /// Reorder channels by a permutation of column indices.
    pub fn permute_channels(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.num_channels() {
            return Err(Error::ShapeMismatch("permutation length".into()));
        }
        let ids: Vec<u16> = perm.iter().map(|&j| self.channel_ids[j]).collect();
        let mut pixels = Vec::with_capacity(self.pixels.len());
        for &j in perm {
            pixels.extend_from_slice(self.channel_plane(j));
        }
        MultiChannelImage::new(self.h, self.w, ids, pixels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchConfig {
    pub p: usize,
    pub d: usize,
    pub l: usize,
    pub n_max_channels: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Cls,
    Memory,
    Patch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenMeta {
    pub kind: TokenKind,
    /// Spatial position 0..n-1 for patch tokens.
    pub position: Option<usize>,
    pub channel_id: Option<u16>,
}

impl TokenMeta {
    pub fn special(kind: TokenKind) -> Self {
        Self {
            kind,
            position: None,
            channel_id: None,
        }
    }
    pub fn patch(position: usize, channel_id: u16) -> Self {
        Self {
            kind: TokenKind::Patch,
            position: Some(position),
            channel_id: Some(channel_id),
        }
    }
}

/// Ordered embeddings `[CLS | memory x l | patch tokens]` on the tape,
/// with per-token metadata.
#[derive(Debug)]
pub struct TokenSequence {
    pub embeddings: Var,
    pub meta: Vec<TokenMeta>,
    /// Patches per channel.
    pub n: usize,
    /// Channel count of the image this sequence came from.
    pub c: usize,
    /// Memory token count.
    pub l: usize,
}

impl TokenSequence {
    pub fn seq_len(&self) -> usize {
        self.meta.len()
    }
}

/// Flattened `p x p` patches of every channel, channel-major slot order,
/// one row per (position, channel) pair. This fixed layout is shared by
/// the decoder output and the reconstruction targets.
pub fn extract_patches<E: Scalar>(image: &MultiChannelImage, p: usize) -> Tensor<E> {
    assert!(p >= 1 && image.h.is_multiple_of(p) && image.w.is_multiple_of(p));
    let gw = image.w / p;
    let n = (image.h / p) * gw;
    let c = image.num_channels();
    let mut out = Tensor::zeros(&[n * c, p * p]);
    for j in 0..c {
        let plane = image.channel_plane(j);
        for i in 0..n {
            let gy = i / gw;
            let gx = i % gw;
            let row = out.row_mut(j * n + i);
            for py in 0..p {
                for px in 0..p {
                    row[py * p + px] = E::from_f32(plane[(gy * p + py) * image.w + gx * p + px]);
                }
            }
        }
    }
    out
}

/// Exact inverse of [`extract_patches`]' layout.
pub fn unpatchify(
    patches: &Tensor<f32>,
    h: usize,
    w: usize,
    channel_ids: &[u16],
    p: usize,
) -> Result<MultiChannelImage> {
    let c = channel_ids.len();
    if !h.is_multiple_of(p) || !w.is_multiple_of(p) {
        return Err(Error::NonDivisible { h, w, p });
    }
    let gw = w / p;
    let n = (h / p) * gw;
    let (rows, cols) = patches.dims2();
    if rows != n * c || cols != p * p {
        return Err(Error::ShapeMismatch(format!(
            "patch tensor {rows}x{cols} does not cover {h}x{w}x{c} with p={p}"
        )));
    }
    let mut img = MultiChannelImage::zeros(h, w, channel_ids.to_vec());
    for j in 0..c {
        for i in 0..n {
            let gy = i / gw;
            let gx = i % gw;
            let row = patches.row(j * n + i);
            for py in 0..p {
                for px in 0..p {
                    img.set(gx * p + px, gy * p + py, j, row[py * p + px]);
                }
            }
        }
    }
    Ok(img)
}

/// Tokenize an image: shared projection of flattened patches, additive
/// positional embedding (per spatial position, shared across channels),
/// additive channel token (per channel id), then CLS and memory tokens
/// prepended.
pub fn patchify<E: Scalar>(
    tape: &Tape<E>,
    image: &MultiChannelImage,
    cfg: &PatchConfig,
    params: &ModelParams<Var>,
) -> Result<TokenSequence> {
    if cfg.p == 0 || !image.h.is_multiple_of(cfg.p) || !image.w.is_multiple_of(cfg.p) {
        return Err(Error::NonDivisible {
            h: image.h,
            w: image.w,
            p: cfg.p,
        });
    }
    let c = image.num_channels();
    if c > cfg.n_max_channels {
        return Err(Error::Config(format!(
            "image has {c} channels, table capacity {}",
            cfg.n_max_channels
        )));
    }
    let n = image.h * image.w / (cfg.p * cfg.p);
    let mut channel_rows = Vec::with_capacity(c);
    for &id in &image.channel_ids {
        channel_rows.push(params.channel_row(id)?);
    }

    let raw = extract_patches::<E>(image, cfg.p);
    let pixels = tape.constant(raw);
    let projected = tape.matmul(pixels, params.patch_proj);

    // one gather per table: positions repeat across channels, channel
    // rows repeat across positions
    let pos_idx: Vec<usize> = (0..c).flat_map(|_| 0..n).collect();
    let chan_idx: Vec<usize> = channel_rows
        .iter()
        .flat_map(|&r| std::iter::repeat_n(r, n))
        .collect();
    let with_pos = tape.add(projected, tape.gather_rows(params.pos_embed, pos_idx));
    let with_chan = tape.add(with_pos, tape.gather_rows(params.channel_tokens, chan_idx));

    let embeddings = if cfg.l > 0 {
        tape.concat_rows(&[params.cls_token, params.memory_tokens, with_chan])
    } else {
        tape.concat_rows(&[params.cls_token, with_chan])
    };

    let mut meta = Vec::with_capacity(1 + cfg.l + n * c);
    meta.push(TokenMeta::special(TokenKind::Cls));
    for _ in 0..cfg.l {
        meta.push(TokenMeta::special(TokenKind::Memory));
    }
    for j in 0..c {
        for i in 0..n {
            meta.push(TokenMeta::patch(i, image.channel_ids[j]));
        }
    }

    Ok(TokenSequence {
        embeddings,
        meta,
        n,
        c,
        l: cfg.l,
    })
}
