//! The class-balanced synthetic buffer.
//!
//! Slots are laid out class-major: class `c` owns slots
//! `c·ipc .. (c+1)·ipc`. Labels and slot count are fixed at construction;
//! only pixel values change, and every change bumps `version`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;

use crate::condense::{condense_offline, MatchConfig};
use crate::data::{Dataset, Normalization};
use crate::error::{Error, Result};
use crate::model::Architecture;
use crate::rng;
use crate::scalar::{Scalar, Storable};
use crate::tensor::{ImageBatch, Shape};

#[derive(Clone, Debug, PartialEq)]
pub struct CondensedBuffer<T> {
    images: ImageBatch<T>,
    labels: Vec<usize>,
    ipc: usize,
    classes: usize,
    version: u64,
    normalization: Normalization,
}

/// Copy of a subset of slots.
#[derive(Clone, Debug, PartialEq)]
pub struct BufferSlice<T> {
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
    pub images: ImageBatch<T>,
}

/// Mutable view over the slots of some classes. Each [`update`](Self::update)
/// writes through to the buffer, clamps pixels and bumps the version once.
pub struct BufferSliceMut<'a, T> {
    buffer: &'a mut CondensedBuffer<T>,
    indices: Vec<usize>,
}

impl<T: Scalar> BufferSliceMut<'_, T> {
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn image(&self, k: usize) -> &[T] {
        self.buffer.images.image(self.indices[k])
    }

    /// Calls `f(k, slot_index, pixels)` for every slot of the view.
    pub fn update(&mut self, mut f: impl FnMut(usize, usize, &mut [T])) {
        for (k, &slot) in self.indices.iter().enumerate() {
            f(k, slot, self.buffer.images.image_mut(slot));
        }
        self.buffer.clamp_slots(&self.indices);
        self.buffer.version += 1;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum InitMode {
    /// `ipc` distinct real samples per class.
    RealSample,
    /// Per-class pixel mean plus Gaussian noise at 10% of the per-pixel class std.
    ClassMean,
    /// Real-sample start followed by offline gradient matching on the labeled set.
    CondenseOffline { iterations: usize, batch_per_class: usize, architecture: Architecture, matching: MatchConfig },
}

impl InitMode {
    /// Offline condensation with 200 iterations and default matching settings.
    pub fn condense_offline(architecture: Architecture) -> Self {
        Self::CondenseOffline { iterations: 200, batch_per_class: 64, architecture, matching: MatchConfig::default() }
    }
}

impl<T: Scalar> CondensedBuffer<T> {
    pub fn zeros(classes: usize, ipc: usize, shape: Shape, normalization: Normalization) -> Result<Self> {
        if ipc == 0 || classes == 0 {
            return Err(Error::config("buffer needs at least one class and one image per class"));
        }
        if normalization.mean.len() != shape.channels {
            return Err(Error::shape(shape.channels, normalization.mean.len()));
        }
        Ok(Self {
            images: ImageBatch::zeros(shape, classes * ipc),
            labels: (0..classes * ipc).map(|i| i / ipc).collect(),
            ipc,
            classes,
            version: 0,
            normalization,
        })
    }

    /// Buffer from explicit class-major images.
    pub fn from_images(
        images: ImageBatch<T>,
        classes: usize,
        ipc: usize,
        normalization: Normalization,
    ) -> Result<Self> {
        let mut b = Self::zeros(classes, ipc, images.shape(), normalization)?;
        if images.len() != classes * ipc {
            return Err(Error::shape(classes * ipc, images.len()));
        }
        b.images = images;
        b.clamp_slots(&(0..classes * ipc).collect::<Vec<_>>());
        Ok(b)
    }

    pub fn images(&self) -> &ImageBatch<T> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn ipc(&self) -> usize {
        self.ipc
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn shape(&self) -> Shape {
        self.images.shape()
    }

    pub fn normalization(&self) -> &Normalization {
        &self.normalization
    }

    /// Storage footprint of the pixel payload; fixed by (classes, ipc, shape).
    pub fn payload_bytes(&self) -> usize {
        self.len() * self.shape().numel() * std::mem::size_of::<T>()
    }

    /// Slots of the given classes, ascending.
    pub fn slots_for_classes(&self, classes: &[usize]) -> Result<Vec<usize>> {
        let mut sorted = classes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if let Some(&c) = sorted.iter().find(|&&c| c >= self.classes) {
            return Err(Error::input(format!("unknown class {c}")));
        }
        Ok(sorted.iter().flat_map(|&c| c * self.ipc..(c + 1) * self.ipc).collect())
    }

    pub fn class_slots(&self, class: usize) -> std::ops::Range<usize> {
        class * self.ipc..(class + 1) * self.ipc
    }

    pub fn slice_by_classes(&self, classes: &[usize]) -> Result<BufferSlice<T>> {
        let indices = self.slots_for_classes(classes)?;
        Ok(BufferSlice {
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            images: self.images.select(&indices),
            indices,
        })
    }

    pub fn slice_by_classes_mut(&mut self, classes: &[usize]) -> Result<BufferSliceMut<'_, T>> {
        let indices = self.slots_for_classes(classes)?;
        Ok(BufferSliceMut { buffer: self, indices })
    }

    /// Mutable view over explicit slot indices (must be whole class slices).
    pub fn slots_mut(&mut self, indices: &[usize]) -> Result<BufferSliceMut<'_, T>> {
        if let Some(&i) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::input(format!("slot {i} out of range")));
        }
        Ok(BufferSliceMut { buffer: self, indices: indices.to_vec() })
    }

    fn clamp_slots(&mut self, slots: &[usize]) {
        let shape = self.shape();
        let plane = shape.height * shape.width;
        let ranges: Vec<(T, T)> =
            self.normalization.normalized_range().into_iter().map(|(lo, hi)| (T::lit(lo), T::lit(hi))).collect();
        for &s in slots {
            let img = self.images.image_mut(s);
            for (ch, &(lo, hi)) in ranges.iter().enumerate() {
                for v in &mut img[ch * plane..(ch + 1) * plane] {
                    *v = v.max(lo).min(hi);
                }
            }
        }
    }

    /// Checks the class-balance and layout invariants.
    pub fn check_balance(&self) -> Result<()> {
        if self.labels.len() != self.classes * self.ipc || self.images.len() != self.labels.len() {
            return Err(Error::numeric(format!(
                "buffer holds {} labels / {} images, expected {}",
                self.labels.len(),
                self.images.len(),
                self.classes * self.ipc
            )));
        }
        for (i, &l) in self.labels.iter().enumerate() {
            if l != i / self.ipc {
                return Err(Error::numeric(format!("slot {i} labelled {l}, expected {}", i / self.ipc)));
            }
        }
        Ok(())
    }

    /// Images and labels as one unit-weight training batch.
    pub fn as_training_set(&self) -> (ImageBatch<T>, Vec<usize>) {
        (self.images.clone(), self.labels.clone())
    }
}

pub fn initialize_buffer<T: Scalar>(
    labeled: &Dataset<T>,
    ipc: usize,
    mode: &InitMode,
    normalization: Normalization,
    seed: u64,
) -> Result<CondensedBuffer<T>> {
    let mut buf = CondensedBuffer::zeros(labeled.classes, ipc, labeled.shape(), normalization)?;
    let by_class = labeled.class_indices();
    if let Some(c) = by_class.iter().position(Vec::is_empty) {
        return Err(Error::config(format!("class {c} has no labeled samples")));
    }
    let mut r = rng::rng(seed);
    let numel = labeled.shape().numel();
    match mode {
        InitMode::RealSample | InitMode::CondenseOffline { .. } => {
            if let Some(c) = by_class.iter().position(|v| v.len() < ipc) {
                return Err(Error::config(format!(
                    "class {c} has {} labeled samples, fewer than ipc = {ipc}",
                    by_class[c].len()
                )));
            }
            for (c, idx) in by_class.iter().enumerate() {
                let picks = sample(&mut r, idx.len(), ipc);
                for (k, p) in picks.iter().enumerate() {
                    buf.images.image_mut(c * ipc + k).copy_from_slice(labeled.images.image(idx[p]));
                }
            }
        }
        InitMode::ClassMean => {
            use rand_distr::{Distribution, StandardNormal};
            for (c, idx) in by_class.iter().enumerate() {
                let n = idx.len() as f64;
                let mut mean = vec![0.0; numel];
                let mut sq = vec![0.0; numel];
                for &i in idx {
                    for (j, v) in labeled.images.image(i).iter().enumerate() {
                        mean[j] += v.real() / n;
                        sq[j] += v.real() * v.real() / n;
                    }
                }
                for k in 0..ipc {
                    let img = buf.images.image_mut(c * ipc + k);
                    for j in 0..numel {
                        let sd = (sq[j] - mean[j] * mean[j]).max(0.0).sqrt();
                        let z: f64 = StandardNormal.sample(&mut r);
                        img[j] = T::lit(mean[j] + 0.1 * sd * z);
                    }
                }
            }
        }
    }
    let all: Vec<usize> = (0..buf.len()).collect();
    buf.clamp_slots(&all);
    if let InitMode::CondenseOffline { iterations, batch_per_class, architecture, matching } = mode {
        condense_offline(&mut buf, labeled, architecture, matching, *iterations, *batch_per_class, seed)?;
    }
    Ok(buf)
}

const MAGIC: &str = "DECO-BUFFER 1";

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ")
}

pub fn write_buffer<T: Storable>(buf: &CondensedBuffer<T>) -> Vec<u8> {
    let s = buf.shape();
    let n = &buf.normalization;
    let mut header = String::new();
    writeln!(header, "{MAGIC}").unwrap();
    writeln!(header, "scalar {}", T::NAME).unwrap();
    writeln!(header, "classes {}", buf.classes).unwrap();
    writeln!(header, "ipc {}", buf.ipc).unwrap();
    writeln!(header, "shape {} {} {}", s.channels, s.height, s.width).unwrap();
    writeln!(header, "mean {}", join(&n.mean)).unwrap();
    writeln!(header, "std {}", join(&n.std)).unwrap();
    writeln!(header, "raw_min {}", join(&n.raw_min)).unwrap();
    writeln!(header, "raw_max {}", join(&n.raw_max)).unwrap();
    writeln!(header, "version {}", buf.version).unwrap();
    writeln!(header, "payload").unwrap();
    let mut out = header.into_bytes();
    for &l in &buf.labels {
        out.extend_from_slice(&(l as u32).to_le_bytes());
    }
    for &v in buf.images.as_slice() {
        v.write_le(&mut out);
    }
    out
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderReader<'a> {
    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let nl =
            rest.iter().position(|&b| b == b'\n').ok_or_else(|| Error::format(self.pos, "unterminated header line"))?;
        let line = std::str::from_utf8(&rest[..nl]).map_err(|_| Error::format(self.pos, "header is not UTF-8"))?;
        self.pos += nl + 1;
        Ok(line)
    }

    fn field(&mut self, key: &str) -> Result<Vec<&'a str>> {
        let at = self.pos;
        let line = self.line()?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some(key) {
            return Err(Error::format(at, format!("expected `{key}` line, found {line:?}")));
        }
        Ok(parts.collect())
    }

    fn usizes(&mut self, key: &str, count: usize) -> Result<Vec<usize>> {
        let at = self.pos;
        let vals = self.field(key)?;
        if vals.len() != count {
            return Err(Error::format(at, format!("`{key}` needs {count} values")));
        }
        vals.iter().map(|v| v.parse().map_err(|_| Error::format(at, format!("bad integer {v:?} in `{key}`")))).collect()
    }

    fn floats(&mut self, key: &str, count: usize) -> Result<Vec<f64>> {
        let at = self.pos;
        let vals = self.field(key)?;
        if vals.len() != count {
            return Err(Error::format(at, format!("`{key}` needs {count} values")));
        }
        vals.iter().map(|v| v.parse().map_err(|_| Error::format(at, format!("bad number {v:?} in `{key}`")))).collect()
    }
}

pub fn read_buffer<T: Storable>(bytes: &[u8]) -> Result<CondensedBuffer<T>> {
    let mut h = HeaderReader { bytes, pos: 0 };
    if h.line()? != MAGIC {
        return Err(Error::format(0, "missing buffer magic"));
    }
    let at = h.pos;
    let scalar = h.field("scalar")?;
    if scalar != [T::NAME] {
        return Err(Error::format(at, format!("buffer holds {scalar:?}, {} requested", T::NAME)));
    }
    let classes = h.usizes("classes", 1)?[0];
    let ipc = h.usizes("ipc", 1)?[0];
    let dims = h.usizes("shape", 3)?;
    let shape = Shape::new(dims[0], dims[1], dims[2]);
    let c = shape.channels;
    let normalization = Normalization {
        mean: h.floats("mean", c)?,
        std: h.floats("std", c)?,
        raw_min: h.floats("raw_min", c)?,
        raw_max: h.floats("raw_max", c)?,
    };
    let version = h.usizes("version", 1)?[0] as u64;
    h.field("payload")?;
    let slots = classes * ipc;
    let need = h.pos + slots * 4 + slots * shape.numel() * T::BYTES;
    if bytes.len() != need {
        return Err(Error::format(
            bytes.len().min(need),
            format!("payload is {} bytes, expected {}", bytes.len() - h.pos, need - h.pos),
        ));
    }
    let mut pos = h.pos;
    let mut labels = Vec::with_capacity(slots);
    for _ in 0..slots {
        labels.push(u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize);
        pos += 4;
    }
    let mut data = Vec::with_capacity(slots * shape.numel());
    for _ in 0..slots * shape.numel() {
        data.push(T::read_le(&bytes[pos..pos + T::BYTES]));
        pos += T::BYTES;
    }
    let mut buf = CondensedBuffer::zeros(classes, ipc, shape, normalization)?;
    if labels != buf.labels {
        return Err(Error::format(h.pos, "labels are not a class-major balanced layout"));
    }
    buf.images = ImageBatch::new(shape, data)?;
    buf.version = version;
    Ok(buf)
}

pub fn save_buffer<T: Storable>(buf: &CondensedBuffer<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, write_buffer(buf))?;
    Ok(())
}

pub fn load_buffer<T: Storable>(path: impl AsRef<Path>) -> Result<CondensedBuffer<T>> {
    read_buffer(&fs::read(path)?)
}

/// Loads a buffer and checks it against the expected class count and ipc.
pub fn load_buffer_for<T: Storable>(path: impl AsRef<Path>, classes: usize, ipc: usize) -> Result<CondensedBuffer<T>> {
    let buf = load_buffer(path)?;
    if buf.classes != classes || buf.ipc != ipc {
        return Err(Error::config(format!(
            "buffer file has {} classes x {} ipc, configuration expects {classes} x {ipc}",
            buf.classes, buf.ipc
        )));
    }
    Ok(buf)
}

/// Writes the buffer as a PNG grid: one row per class, one column per slot.
/// Pixels are mapped back to raw space and stretched to the raw value range.
pub fn export_png_grid<T: Scalar>(buf: &CondensedBuffer<T>, path: impl AsRef<Path>) -> Result<()> {
    let s = buf.shape();
    let n = &buf.normalization;
    let (tile_w, tile_h) = (s.width as u32, s.height as u32);
    let gap = 1u32;
    let w = buf.ipc as u32 * (tile_w + gap);
    let h = buf.classes as u32 * (tile_h + gap);
    let mut img = image::RgbImage::new(w.max(1), h.max(1));
    let plane = s.height * s.width;
    for slot in 0..buf.len() {
        let (row, col) = ((slot / buf.ipc) as u32, (slot % buf.ipc) as u32);
        let px = buf.images.image(slot);
        for y in 0..s.height {
            for x in 0..s.width {
                let mut rgb = [0u8; 3];
                for (k, out) in rgb.iter_mut().enumerate() {
                    let ch = if s.channels >= 3 { k } else { 0 };
                    let raw = px[ch * plane + y * s.width + x].real() * n.std[ch] + n.mean[ch];
                    let (lo, hi) = (n.raw_min[ch], n.raw_max[ch]);
                    let t = if lo.is_finite() && hi.is_finite() && hi > lo {
                        (raw - lo) / (hi - lo)
                    } else {
                        0.5 + raw / 8.0
                    };
                    *out = (t.clamp(0.0, 1.0) * 255.0).round() as u8;
                }
                img.put_pixel(col * (tile_w + gap) + x as u32, row * (tile_h + gap) + y as u32, image::Rgb(rgb));
            }
        }
    }
    img.save(path.as_ref()).map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_blob_dataset;

    fn blobs() -> Dataset<f64> {
        synthetic_blob_dataset(3, 6, Shape::new(1, 2, 2), 4.0, 3).unwrap()
    }

    #[test]
    fn real_sample_init_copies_labeled_images() {
        let d = blobs();
        let b = initialize_buffer(&d, 1, &InitMode::RealSample, Normalization::identity(1), 1).unwrap();
        b.check_balance().unwrap();
        for c in 0..3 {
            let slot = b.images().image(c);
            let hit = d.class_indices()[c].iter().any(|&i| d.images.image(i) == slot);
            assert!(hit, "slot {c} is not a real sample of its class");
        }
        assert!(initialize_buffer(&d, 7, &InitMode::RealSample, Normalization::identity(1), 1).is_err());
    }

    #[test]
    fn class_mean_of_identical_samples_is_exact() {
        let img = [0.5, -1.0, 2.0, 0.25];
        let data: Vec<f64> = (0..4).flat_map(|i| if i < 2 { img.to_vec() } else { vec![i as f64; 4] }).collect();
        let d = Dataset::new(ImageBatch::new(Shape::new(1, 2, 2), data).unwrap(), vec![0, 0, 1, 1], 2).unwrap();
        let b = initialize_buffer(&d, 3, &InitMode::ClassMean, Normalization::identity(1), 9).unwrap();
        for k in 0..3 {
            assert_eq!(b.images().image(k), &img);
        }
    }

    #[test]
    fn empty_class_is_config_error() {
        let d = Dataset::new(ImageBatch::new(Shape::flat(1), vec![1.0]).unwrap(), vec![0], 2).unwrap();
        let err = initialize_buffer(&d, 1, &InitMode::ClassMean, Normalization::identity(1), 0).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn slices_cover_whole_classes() {
        let b = CondensedBuffer::<f64>::zeros(4, 3, Shape::flat(2), Normalization::identity(1)).unwrap();
        assert_eq!(b.slice_by_classes(&[0, 1, 2, 3]).unwrap().indices, (0..12).collect::<Vec<_>>());
        assert!(b.slice_by_classes(&[]).unwrap().indices.is_empty());
        let one = b.slice_by_classes(&[2]).unwrap();
        assert_eq!(one.indices, vec![6, 7, 8]);
        assert_eq!(one.labels, vec![2, 2, 2]);
        assert!(matches!(b.slice_by_classes(&[4]), Err(Error::Input(_))));
    }

    #[test]
    fn writes_through_view_bump_version_and_clamp() {
        let norm = Normalization { mean: vec![0.0], std: vec![1.0], raw_min: vec![-1.0], raw_max: vec![1.0] };
        let mut b = CondensedBuffer::<f64>::zeros(2, 2, Shape::flat(2), norm).unwrap();
        {
            let mut view = b.slice_by_classes_mut(&[1]).unwrap();
            view.update(|k, _, px| px.iter_mut().for_each(|v| *v = 5.0 * (k as f64 + 1.0) - 7.0));
        }
        assert_eq!(b.version(), 1);
        assert_eq!(b.images().image(2), &[-1.0, -1.0]);
        assert_eq!(b.images().image(3), &[1.0, 1.0]);
        assert_eq!(b.images().image(0), &[0.0, 0.0]);
    }

    #[test]
    fn file_round_trip_is_byte_identical() {
        let d = blobs();
        let norm = Normalization::fit(&d).unwrap();
        let mut b = initialize_buffer(&d, 2, &InitMode::ClassMean, norm, 4).unwrap();
        b.slice_by_classes_mut(&[0]).unwrap().update(|_, _, px| px[0] += 0.125);
        let bytes = write_buffer(&b);
        let back: CondensedBuffer<f64> = read_buffer(&bytes).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.version(), 1);
        assert_eq!(write_buffer(&back), bytes);
    }

    #[test]
    fn truncated_file_reports_offset() {
        let b = CondensedBuffer::<f32>::zeros(2, 2, Shape::flat(3), Normalization::identity(1)).unwrap();
        let bytes = write_buffer(&b);
        match read_buffer::<f32>(&bytes[..bytes.len() - 1]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, bytes.len() - 1),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn mismatched_class_count_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.buf");
        let b = CondensedBuffer::<f64>::zeros(3, 2, Shape::flat(3), Normalization::identity(1)).unwrap();
        save_buffer(&b, &path).unwrap();
        assert!(load_buffer_for::<f64>(&path, 3, 2).is_ok());
        assert!(matches!(load_buffer_for::<f64>(&path, 10, 2), Err(Error::Config(_))));
    }

    #[test]
    fn png_grid_has_one_tile_per_slot() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.png");
        let d = synthetic_blob_dataset::<f64>(2, 4, Shape::new(3, 4, 4), 2.0, 1).unwrap();
        let b = initialize_buffer(&d, 3, &InitMode::RealSample, Normalization::fit(&d).unwrap(), 2).unwrap();
        export_png_grid(&b, &path).unwrap();
        let img = image::open(&path).unwrap();
        assert_eq!((img.width(), img.height()), (3 * 5, 2 * 5));
    }
}
