//! Client upload payload and its binary encoding.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! offset  size  field
//!      0     4  magic "HFUP"
//!      4     2  format version (1)
//!      6     2  reserved, zero
//!      8     4  client id (u32)
//!     12     4  round (u32)
//!     16     8  sample count (u64)
//!     24     8  final local loss (f64)
//!     32     2  layers L (u16)
//!     34     2  heads H (u16)
//!     36     4  hidden d (u32)
//!     40     4  rank r (u32)
//!     44     4  classes C (u32)
//!     48        body
//! ```
//!
//! Body, every item 4 bytes:
//!
//! ```text
//! importance      L·H × f32, layer-major; pruned heads carry 0
//! for each layer:
//!   kept count k  u32
//!   for Q, K, V:
//!     ΔA          r·d × f32, row-major
//!     k blocks    { head id u32, ΔB rows of that head: (d/H)·r × f32 }
//! Δhead           d·C × f32, row-major
//! ```
//!
//! Values are carried as `f64` in memory but rounded to `f32` when the
//! update is built, so `decode(encode(u)) == u` holds exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

use super::{head_slice, LoraAdapter, PruneMask, Projection};

pub const MAGIC: [u8; 4] = *b"HFUP";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_BYTES: usize = 48;
/// Every body item (parameter, score, count, head id) is 4 bytes on the wire.
pub const WORD_BYTES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateLayout {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub rank: usize,
    pub classes: usize,
}

impl UpdateLayout {
    pub fn of(config: &ModelConfig) -> Self {
        Self {
            layers: config.layers,
            heads: config.heads,
            hidden: config.hidden,
            rank: config.rank,
            classes: config.classes,
        }
    }

    pub fn block_len(&self) -> usize {
        self.hidden / self.heads * self.rank
    }

    /// Encoded size in bytes for an update keeping `kept_heads` heads in total.
    pub fn payload_len(&self, kept_heads: usize) -> usize {
        HEADER_BYTES + WORD_BYTES * self.payload_words(kept_heads)
    }

    fn payload_words(&self, kept_heads: usize) -> usize {
        let per_block = 1 + self.block_len();
        self.layers * self.heads
            + self.layers
            + 3 * self.layers * self.rank * self.hidden
            + 3 * kept_heads * per_block
            + self.hidden * self.classes
    }

    /// Trainable values transmitted: `|A| + |kept B| + |head|`.
    pub fn transmitted_params(&self, kept_heads: usize) -> usize {
        3 * self.layers * self.rank * self.hidden
            + 3 * kept_heads * self.block_len()
            + self.hidden * self.classes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateHeader {
    pub client_id: u32,
    pub round: u32,
    pub sample_count: u64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionDelta {
    /// ΔA, `r·d` values.
    pub a: Vec<f64>,
    /// `(head, ΔB rows of that head)` in ascending head order.
    pub b_blocks: Vec<(usize, Vec<f64>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientUpdate {
    pub header: UpdateHeader,
    pub layout: UpdateLayout,
    /// Thresholded importance, `[L·H]`, layer-major.
    pub importance: Vec<f64>,
    /// `layers[l][p]` for projection `p` in Q, K, V order.
    pub layers: Vec<Vec<ProjectionDelta>>,
    /// Δ task head, `d·C` values.
    pub head: Vec<f64>,
}

fn to_wire(v: f64) -> f64 {
    v as f32 as f64
}

/// Packs a round's delta into a sparse update: dense ΔA and Δhead, ΔB only
/// for heads the mask keeps.
pub fn serialize_sparse(
    delta: &LoraAdapter,
    mask: &PruneMask,
    importance: &[f64],
    header: UpdateHeader,
) -> Result<ClientUpdate> {
    let layers = delta.layers.len();
    let heads = mask.heads();
    if mask.layers() != layers || importance.len() != layers * heads {
        return Err(Error::protocol(format!(
            "mask {}x{} / importance {} do not match {} layers",
            mask.layers(),
            heads,
            importance.len(),
            layers
        )));
    }
    for l in 0..layers {
        for h in 0..heads {
            if !mask.is_kept(l, h) && importance[l * heads + h] != 0.0 {
                return Err(Error::protocol(format!(
                    "pruned head ({l}, {h}) carries non-zero importance"
                )));
            }
        }
    }
    let first_b = &delta.layers.first().map(|l| &l.query.b);
    let (hidden, rank) = match first_b {
        Some(b) => (b.shape()[0], b.shape()[1]),
        None => (delta.head.shape()[0], 0),
    };
    let layout = UpdateLayout {
        layers,
        heads,
        hidden,
        rank,
        classes: delta.head.cols(),
    };
    let mut out_layers = Vec::with_capacity(layers);
    for (l, layer) in delta.layers.iter().enumerate() {
        let mut projections = Vec::with_capacity(3);
        for proj in Projection::ALL {
            let pair = layer.get(proj);
            let b_blocks = mask
                .kept_in_layer(l)
                .map(|h| {
                    let block = head_slice(&pair.b, heads, h)?;
                    Ok((h, block.iter().copied().map(to_wire).collect()))
                })
                .collect::<Result<Vec<_>>>()?;
            projections.push(ProjectionDelta {
                a: pair.a.data().iter().copied().map(to_wire).collect(),
                b_blocks,
            });
        }
        out_layers.push(projections);
    }
    Ok(ClientUpdate {
        header,
        layout,
        importance: importance.iter().copied().map(to_wire).collect(),
        layers: out_layers,
        head: delta.head.data().iter().copied().map(to_wire).collect(),
    })
}

impl ClientUpdate {
    pub fn kept_heads(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.first().map_or(0, |p| p.b_blocks.len()))
            .sum()
    }

    pub fn mask(&self) -> PruneMask {
        let mut keep = vec![false; self.layout.layers * self.layout.heads];
        for (l, layer) in self.layers.iter().enumerate() {
            if let Some(p) = layer.first() {
                for (h, _) in &p.b_blocks {
                    keep[l * self.layout.heads + h] = true;
                }
            }
        }
        PruneMask::from_keep(self.layout.layers, self.layout.heads, keep)
            .expect("layout-consistent mask")
    }

    pub fn b_block(&self, layer: usize, proj: Projection, head: usize) -> Option<&[f64]> {
        let p = Projection::ALL.iter().position(|x| *x == proj)?;
        self.layers
            .get(layer)?
            .get(p)?
            .b_blocks
            .iter()
            .find(|(h, _)| *h == head)
            .map(|(_, v)| v.as_slice())
    }

    pub fn importance_at(&self, layer: usize, head: usize) -> f64 {
        self.importance[layer * self.layout.heads + head]
    }

    pub fn encoded_len(&self) -> usize {
        self.layout.payload_len(self.kept_heads())
    }

    pub fn transmitted_params(&self) -> usize {
        self.layout.transmitted_params(self.kept_heads())
    }

    pub fn encode(&self) -> Vec<u8> {
        let lay = &self.layout;
        let mut buf = Vec::with_capacity(self.encoded_len());
        buf.extend_from_slice(&MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&0u16.to_le_bytes());
        buf.extend_from_slice(&self.header.client_id.to_le_bytes());
        buf.extend_from_slice(&self.header.round.to_le_bytes());
        buf.extend_from_slice(&self.header.sample_count.to_le_bytes());
        buf.extend_from_slice(&self.header.final_loss.to_le_bytes());
        buf.extend_from_slice(&(lay.layers as u16).to_le_bytes());
        buf.extend_from_slice(&(lay.heads as u16).to_le_bytes());
        buf.extend_from_slice(&(lay.hidden as u32).to_le_bytes());
        buf.extend_from_slice(&(lay.rank as u32).to_le_bytes());
        buf.extend_from_slice(&(lay.classes as u32).to_le_bytes());
        let put = |buf: &mut Vec<u8>, vals: &[f64]| {
            for v in vals {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        };
        put(&mut buf, &self.importance);
        for layer in &self.layers {
            let kept = layer.first().map_or(0, |p| p.b_blocks.len()) as u32;
            buf.extend_from_slice(&kept.to_le_bytes());
            for p in layer {
                put(&mut buf, &p.a);
                for (h, block) in &p.b_blocks {
                    buf.extend_from_slice(&(*h as u32).to_le_bytes());
                    put(&mut buf, block);
                }
            }
        }
        put(&mut buf, &self.head);
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Decode("bad magic".into()));
        }
        let version = r.u16()?;
        if version != FORMAT_VERSION {
            return Err(Error::Decode(format!("unsupported format version {version}")));
        }
        r.u16()?;
        let header = UpdateHeader {
            client_id: r.u32()?,
            round: r.u32()?,
            sample_count: r.u64()?,
            final_loss: f64::from_le_bytes(r.array()?),
        };
        let layout = UpdateLayout {
            layers: r.u16()? as usize,
            heads: r.u16()? as usize,
            hidden: r.u32()? as usize,
            rank: r.u32()? as usize,
            classes: r.u32()? as usize,
        };
        if layout.heads == 0 || layout.hidden % layout.heads != 0 {
            return Err(Error::Decode("hidden size not divisible by heads".into()));
        }
        let importance = r.floats(layout.layers * layout.heads)?;
        let mut layers = Vec::with_capacity(layout.layers);
        for _ in 0..layout.layers {
            let kept = r.u32()? as usize;
            if kept > layout.heads {
                return Err(Error::Decode(format!("{kept} kept heads exceeds {}", layout.heads)));
            }
            let mut projections = Vec::with_capacity(3);
            let mut ids: Option<Vec<usize>> = None;
            for _ in 0..3 {
                let a = r.floats(layout.rank * layout.hidden)?;
                let mut b_blocks = Vec::with_capacity(kept);
                for _ in 0..kept {
                    let h = r.u32()? as usize;
                    if h >= layout.heads || b_blocks.last().is_some_and(|(p, _)| *p >= h) {
                        return Err(Error::Decode(format!("bad head id {h}")));
                    }
                    b_blocks.push((h, r.floats(layout.block_len())?));
                }
                let these: Vec<usize> = b_blocks.iter().map(|(h, _)| *h).collect();
                match &ids {
                    Some(prev) if *prev != these => {
                        return Err(Error::Decode("projections disagree on kept heads".into()))
                    }
                    _ => ids = Some(these),
                }
                projections.push(ProjectionDelta { a, b_blocks });
            }
            layers.push(projections);
        }
        let head = r.floats(layout.hidden * layout.classes)?;
        if r.pos != bytes.len() {
            return Err(Error::Decode(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            header,
            layout,
            importance,
            layers,
            head,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Decode(format!("truncated at byte {}", self.pos)));
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }
}
