//! Binary masks, per-object mask videos, morphological dilation, and PGM I/O.
//!
//! A [`MaskVideo`] stores one binary mask per (frame, object) pair. Per frame
//! the object masks are pairwise disjoint (layered occlusion: one owner per
//! pixel), which is what makes the id-map PGM serialization lossless.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Single-frame binary mask in row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "mask data length {} != {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Mask {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    /// Number of foreground pixels.
    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn intersection_area(&self, other: &Mask) -> usize {
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(&a, &b)| a && b)
            .count()
    }

    pub fn union_area(&self, other: &Mask) -> usize {
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(&a, &b)| a || b)
            .count()
    }

    pub fn union_with(&mut self, other: &Mask) {
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a || b;
        }
    }

    /// Morphological dilation with a Euclidean disk structuring element.
    /// Radius 0 is the identity.
    pub fn dilate(&self, radius: usize) -> Mask {
        if radius == 0 {
            return self.clone();
        }
        let r = radius as i64;
        let mut offsets = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy <= r * r {
                    offsets.push((dx, dy));
                }
            }
        }
        let mut out = Mask::new(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                if !self.get(x, y) {
                    continue;
                }
                for &(dx, dy) in &offsets {
                    let nx = x as i64 + dx;
                    let ny = y as i64 + dy;
                    if nx >= 0 && ny >= 0 && (nx as usize) < self.width && (ny as usize) < self.height
                    {
                        out.set(nx as usize, ny as usize, true);
                    }
                }
            }
        }
        out
    }

    /// Inner boundary under 4-connectivity: a foreground pixel is boundary if
    /// any of its 4 neighbours is background or outside the image.
    pub fn inner_boundary(&self) -> Mask {
        let mut out = Mask::new(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                if !self.get(x, y) {
                    continue;
                }
                let edge = x == 0
                    || y == 0
                    || x + 1 == self.width
                    || y + 1 == self.height
                    || !self.get(x - 1, y)
                    || !self.get(x + 1, y)
                    || !self.get(x, y - 1)
                    || !self.get(x, y + 1);
                if edge {
                    out.set(x, y, true);
                }
            }
        }
        out
    }
}

/// Per-frame, per-object binary masks with stable object ids.
///
/// Masks are stored frame-major: index `frame * object_count + object`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskVideo {
    width: usize,
    height: usize,
    frame_count: usize,
    object_ids: Vec<u16>,
    masks: Vec<Mask>,
}

impl MaskVideo {
    /// Build from per-(frame, object) masks. `masks[f * K + k]` is the mask of
    /// object `object_ids[k]` at frame `f`. Enforces the one-owner-per-pixel
    /// invariant.
    pub fn new(
        width: usize,
        height: usize,
        frame_count: usize,
        object_ids: Vec<u16>,
        masks: Vec<Mask>,
    ) -> Result<Self> {
        let mv = MaskVideo::new_overlapping(width, height, frame_count, object_ids, masks)?;
        if !mv.is_disjoint() {
            return Err(Error::MalformedInput(
                "pixel owned by two objects in the same frame".into(),
            ));
        }
        Ok(mv)
    }

    /// Like `new` but without the one-owner-per-pixel check. Segmentation
    /// pipelines carry overlapping candidate masks until the merge step;
    /// ground truth and final artifacts should use `new`.
    pub fn new_overlapping(
        width: usize,
        height: usize,
        frame_count: usize,
        object_ids: Vec<u16>,
        masks: Vec<Mask>,
    ) -> Result<Self> {
        let k = object_ids.len();
        if masks.len() != frame_count * k {
            return Err(Error::ShapeMismatch(format!(
                "mask count {} != frames {} x objects {}",
                masks.len(),
                frame_count,
                k
            )));
        }
        for m in &masks {
            if m.width != width || m.height != height {
                return Err(Error::ShapeMismatch(
                    "mask resolution differs from video resolution".into(),
                ));
            }
        }
        Ok(MaskVideo {
            width,
            height,
            frame_count,
            object_ids,
            masks,
        })
    }

    pub fn is_disjoint(&self) -> bool {
        for f in 0..self.frame_count {
            let mut owned = vec![false; self.width * self.height];
            for k in 0..self.object_count() {
                for (px, &on) in self.mask(f, k).data.iter().enumerate() {
                    if on {
                        if owned[px] {
                            return false;
                        }
                        owned[px] = true;
                    }
                }
            }
        }
        true
    }

    pub fn empty(width: usize, height: usize, frame_count: usize) -> Self {
        MaskVideo {
            width,
            height,
            frame_count,
            object_ids: Vec::new(),
            masks: Vec::new(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn frame_count(&self) -> usize {
        self.frame_count
    }

    pub fn object_count(&self) -> usize {
        self.object_ids.len()
    }

    pub fn object_ids(&self) -> &[u16] {
        &self.object_ids
    }

    pub fn mask(&self, frame: usize, object_index: usize) -> &Mask {
        &self.masks[frame * self.object_count() + object_index]
    }

    /// Union of all object masks at one frame.
    pub fn frame_union(&self, frame: usize) -> Mask {
        let mut out = Mask::new(self.width, self.height);
        for k in 0..self.object_count() {
            out.union_with(self.mask(frame, k));
        }
        out
    }

    /// Total foreground area of one object across the whole video.
    pub fn object_area(&self, object_index: usize) -> usize {
        (0..self.frame_count)
            .map(|f| self.mask(f, object_index).area())
            .sum()
    }

    /// Keep only the listed object indices, preserving order.
    pub fn select_objects(&self, indices: &[usize]) -> MaskVideo {
        let ids = indices.iter().map(|&i| self.object_ids[i]).collect();
        let mut masks = Vec::with_capacity(self.frame_count * indices.len());
        for f in 0..self.frame_count {
            for &i in indices {
                masks.push(self.mask(f, i).clone());
            }
        }
        MaskVideo {
            width: self.width,
            height: self.height,
            frame_count: self.frame_count,
            object_ids: ids,
            masks,
        }
    }

    /// Flatten frame `f` into an id map (0 = background). Relies on
    /// disjointness; later objects do not overwrite earlier ones.
    pub fn id_map(&self, frame: usize) -> Vec<u16> {
        let mut map = vec![0u16; self.width * self.height];
        for k in 0..self.object_count() {
            let id = self.object_ids[k];
            for (px, &on) in self.mask(frame, k).data.iter().enumerate() {
                if on && map[px] == 0 {
                    map[px] = id;
                }
            }
        }
        map
    }

    /// Rebuild a MaskVideo from per-frame id maps.
    pub fn from_id_maps(width: usize, height: usize, maps: &[Vec<u16>]) -> Result<Self> {
        let mut ids: Vec<u16> = maps
            .iter()
            .flat_map(|m| m.iter().copied())
            .filter(|&id| id != 0)
            .collect();
        ids.sort_unstable();
        ids.dedup();
        let k = ids.len();
        let mut masks = Vec::with_capacity(maps.len() * k);
        for map in maps {
            if map.len() != width * height {
                return Err(Error::ShapeMismatch("id map size mismatch".into()));
            }
            for &id in &ids {
                let data = map.iter().map(|&v| v == id).collect();
                masks.push(Mask::from_data(width, height, data)?);
            }
        }
        MaskVideo::new(width, height, maps.len(), ids, masks)
    }
}

/// Write an id map as a binary PGM (P5), pixel value = object id, 0 = background.
pub fn write_pgm<W: Write>(w: &mut W, width: usize, height: usize, ids: &[u16]) -> Result<()> {
    if ids.len() != width * height {
        return Err(Error::ShapeMismatch("id map size mismatch".into()));
    }
    if let Some(&max) = ids.iter().max() {
        if max > 255 {
            return Err(Error::Format(format!("object id {max} exceeds PGM maxval 255")));
        }
    }
    write!(w, "P5\n{width} {height}\n255\n")?;
    let bytes: Vec<u8> = ids.iter().map(|&v| v as u8).collect();
    w.write_all(&bytes)?;
    Ok(())
}

pub fn write_pgm_file(path: &Path, width: usize, height: usize, ids: &[u16]) -> Result<()> {
    let mut buf = Vec::new();
    write_pgm(&mut buf, width, height, ids)?;
    crate::util::write_atomic(path, &buf)
}

/// Read a binary PGM (P5) id map.
pub fn read_pgm<R: Read>(r: R) -> Result<(usize, usize, Vec<u16>)> {
    let mut reader = BufReader::new(r);
    let mut header = Vec::new();
    // magic, dims, maxval: three whitespace-delimited tokens after "P5"
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 {
            return Err(Error::Format("truncated PGM header".into()));
        }
        let line = line.split('#').next().unwrap_or("");
        tokens.extend(line.split_whitespace().map(|s| s.to_string()));
        header.push(line.to_string());
    }
    if tokens[0] != "P5" {
        return Err(Error::Format(format!("bad PGM magic {:?}", tokens[0])));
    }
    let width: usize = tokens[1]
        .parse()
        .map_err(|_| Error::Format("bad PGM width".into()))?;
    let height: usize = tokens[2]
        .parse()
        .map_err(|_| Error::Format("bad PGM height".into()))?;
    let maxval: usize = tokens[3]
        .parse()
        .map_err(|_| Error::Format("bad PGM maxval".into()))?;
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported PGM maxval {maxval}")));
    }
    let mut bytes = vec![0u8; width * height];
    reader.read_exact(&mut bytes).map_err(|_| {
        Error::Format("truncated PGM payload".into())
    })?;
    Ok((width, height, bytes.into_iter().map(u16::from).collect()))
}

pub fn read_pgm_file(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let f = std::fs::File::open(path)?;
    read_pgm(f)
}
