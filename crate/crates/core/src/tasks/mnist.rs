use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

/// Grayscale image dataset with pixels scaled to [0, 1].
#[derive(Debug, Clone)]
pub struct ImageDataset {
    images: Vec<f64>,
    labels: Vec<u8>,
    count: usize,
    side: usize,
}

impl ImageDataset {
    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// Square image resolution (height = width).
    pub fn side(&self) -> usize {
        self.side
    }

    pub fn pixels_per_image(&self) -> usize {
        self.side * self.side
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let p = self.pixels_per_image();
        &self.images[i * p..(i + 1) * p]
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    /// 2×2 average-pool to half resolution (e.g. 28 → 14).
    pub fn downsample_2x(&self) -> ImageDataset {
        assert!(self.side % 2 == 0, "resolution must be even to pool 2x2");
        let ns = self.side / 2;
        let mut images = Vec::with_capacity(self.count * ns * ns);
        for i in 0..self.count {
            let img = self.image(i);
            for y in 0..ns {
                for x in 0..ns {
                    let s = img[(2 * y) * self.side + 2 * x]
                        + img[(2 * y) * self.side + 2 * x + 1]
                        + img[(2 * y + 1) * self.side + 2 * x]
                        + img[(2 * y + 1) * self.side + 2 * x + 1];
                    images.push(s / 4.0);
                }
            }
        }
        ImageDataset {
            images,
            labels: self.labels.clone(),
            count: self.count,
            side: ns,
        }
    }

    /// Keep only the first `n` images.
    pub fn truncate(&self, n: usize) -> ImageDataset {
        let n = n.min(self.count);
        ImageDataset {
            images: self.images[..n * self.pixels_per_image()].to_vec(),
            labels: self.labels[..n].to_vec(),
            count: n,
            side: self.side,
        }
    }
}

fn read_u32_be(bytes: &[u8], offset: usize, path: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::load(path, "truncated header"))
}

/// Parse IDX image/label byte buffers (big-endian headers, u8 payload).
pub fn parse_idx(images: &[u8], labels: &[u8], origin: &str) -> Result<ImageDataset> {
    let magic = read_u32_be(images, 0, origin)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::load(
            origin,
            format!("image magic mismatch: got {magic:#010x}, want {IDX_IMAGE_MAGIC:#010x}"),
        ));
    }
    let count = read_u32_be(images, 4, origin)? as usize;
    let rows = read_u32_be(images, 8, origin)? as usize;
    let cols = read_u32_be(images, 12, origin)? as usize;
    if rows != cols {
        return Err(Error::load(origin, format!("expected square images, got {rows}x{cols}")));
    }
    let payload = &images[16..];
    if payload.len() != count * rows * cols {
        return Err(Error::load(
            origin,
            format!(
                "image payload holds {} bytes, header declares {}",
                payload.len(),
                count * rows * cols
            ),
        ));
    }

    let lmagic = read_u32_be(labels, 0, origin)?;
    if lmagic != IDX_LABEL_MAGIC {
        return Err(Error::load(
            origin,
            format!("label magic mismatch: got {lmagic:#010x}, want {IDX_LABEL_MAGIC:#010x}"),
        ));
    }
    let lcount = read_u32_be(labels, 4, origin)? as usize;
    if lcount != count {
        return Err(Error::load(
            origin,
            format!("count mismatch: {count} images vs {lcount} labels"),
        ));
    }
    let lpayload = &labels[8..];
    if lpayload.len() != lcount {
        return Err(Error::load(
            origin,
            format!("label payload holds {} bytes, header declares {lcount}", lpayload.len()),
        ));
    }

    Ok(ImageDataset {
        images: payload.iter().map(|&b| b as f64 / 255.0).collect(),
        labels: lpayload.to_vec(),
        count,
        side: rows,
    })
}

/// Load an IDX image/label file pair from disk.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<ImageDataset> {
    let images = std::fs::read(images_path)
        .map_err(|e| Error::load(images_path.display().to_string(), e.to_string()))?;
    let labels = std::fs::read(labels_path)
        .map_err(|e| Error::load(labels_path.display().to_string(), e.to_string()))?;
    parse_idx(&images, &labels, &images_path.display().to_string())
}

// ───── synthetic digit-style dataset ─────

// seven-segment layout on a 28x28 canvas:
//   A     top bar
//  F B    upper verticals
//   G     middle bar
//  E C    lower verticals
//   D     bottom bar
const SEGMENTS: [(f64, f64, f64, f64); 7] = [
    (7.0, 5.0, 21.0, 5.0),   // A
    (21.0, 6.0, 21.0, 13.0), // B
    (21.0, 15.0, 21.0, 22.0), // C
    (7.0, 23.0, 21.0, 23.0), // D
    (7.0, 15.0, 7.0, 22.0),  // E
    (7.0, 6.0, 7.0, 13.0),   // F
    (7.0, 14.0, 21.0, 14.0), // G
];

const DIGIT_SEGMENTS: [&[usize]; 10] = [
    &[0, 1, 2, 3, 4, 5],    // 0
    &[1, 2],                // 1
    &[0, 1, 6, 4, 3],       // 2
    &[0, 1, 6, 2, 3],       // 3
    &[5, 6, 1, 2],          // 4
    &[0, 5, 6, 2, 3],       // 5
    &[0, 5, 4, 3, 2, 6],    // 6
    &[0, 1, 2],             // 7
    &[0, 1, 2, 3, 4, 5, 6], // 8
    &[0, 1, 2, 3, 5, 6],    // 9
];

fn draw_segment(img: &mut [f64], side: usize, seg: (f64, f64, f64, f64), dx: f64, dy: f64, thickness: f64) {
    let (x0, y0, x1, y1) = (seg.0 + dx, seg.1 + dy, seg.2 + dx, seg.3 + dy);
    let len = ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt().max(1e-9);
    for py in 0..side {
        for px in 0..side {
            // distance from pixel center to the segment
            let (cx, cy) = (px as f64, py as f64);
            let t = (((cx - x0) * (x1 - x0) + (cy - y0) * (y1 - y0)) / (len * len)).clamp(0.0, 1.0);
            let (qx, qy) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
            let d = ((cx - qx).powi(2) + (cy - qy).powi(2)).sqrt();
            let v = (1.2 * (thickness - d)).clamp(0.0, 1.0);
            if v > img[py * side + px] {
                img[py * side + px] = v;
            }
        }
    }
}

/// Procedurally rendered seven-segment digits with jitter and noise, encoded
/// as an IDX image/label file pair (28×28, u8 pixels). A stand-in corpus for
/// image runs when no real dataset is on disk.
pub fn synthetic_digits_idx(count: usize, seed: u64) -> (Vec<u8>, Vec<u8>) {
    let side = 28usize;
    let mut rng = Rng::new(seed);
    let mut images = Vec::with_capacity(16 + count * side * side);
    images.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
    images.extend_from_slice(&(count as u32).to_be_bytes());
    images.extend_from_slice(&(side as u32).to_be_bytes());
    images.extend_from_slice(&(side as u32).to_be_bytes());
    let mut labels = Vec::with_capacity(8 + count);
    labels.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(count as u32).to_be_bytes());

    let mut img = vec![0.0f64; side * side];
    for _ in 0..count {
        let digit = rng.usize_below(10);
        img.fill(0.0);
        let dx = rng.uniform_in(-2.0, 2.0);
        let dy = rng.uniform_in(-2.0, 2.0);
        let thickness = rng.uniform_in(1.1, 1.9);
        for &s in DIGIT_SEGMENTS[digit] {
            draw_segment(&mut img, side, SEGMENTS[s], dx, dy, thickness);
        }
        for v in img.iter_mut() {
            let noisy = *v * rng.uniform_in(0.82, 1.0) + rng.uniform_in(0.0, 0.04);
            *v = noisy.clamp(0.0, 1.0);
        }
        images.extend(img.iter().map(|&v| (v * 255.0).round() as u8));
        labels.push(digit as u8);
    }
    (images, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_idx(count: usize, side: usize, pixel: u8) -> (Vec<u8>, Vec<u8>) {
        let mut images = Vec::new();
        images.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
        images.extend_from_slice(&(count as u32).to_be_bytes());
        images.extend_from_slice(&(side as u32).to_be_bytes());
        images.extend_from_slice(&(side as u32).to_be_bytes());
        images.extend(std::iter::repeat(pixel).take(count * side * side));
        let mut labels = Vec::new();
        labels.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
        labels.extend_from_slice(&(count as u32).to_be_bytes());
        labels.extend((0..count).map(|i| i as u8));
        (images, labels)
    }

    #[test]
    fn accepts_valid_headers() {
        let (images, labels) = tiny_idx(3, 4, 128);
        assert_eq!(&images[..4], &[0x00, 0x00, 0x08, 0x03]);
        let ds = parse_idx(&images, &labels, "mem").unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.side(), 4);
        assert!((ds.image(0)[0] - 128.0 / 255.0).abs() < 1e-12);
        assert_eq!(ds.label(2), 2);
    }

    #[test]
    fn rejects_label_magic_on_image_path() {
        let (images, labels) = tiny_idx(2, 4, 0);
        let err = parse_idx(&labels, &images, "mem").unwrap_err();
        assert!(err.to_string().contains("image magic mismatch"), "{err}");
    }

    #[test]
    fn rejects_truncated_payload() {
        let (mut images, labels) = tiny_idx(2, 4, 0);
        images.truncate(images.len() - 5);
        let err = parse_idx(&images, &labels, "mem").unwrap_err();
        assert!(err.to_string().contains("payload"), "{err}");
    }

    #[test]
    fn rejects_count_mismatch() {
        let (images, _) = tiny_idx(2, 4, 0);
        let (_, labels) = tiny_idx(3, 4, 0);
        let err = parse_idx(&images, &labels, "mem").unwrap_err();
        assert!(err.to_string().contains("count mismatch"), "{err}");
    }

    #[test]
    fn downsample_preserves_constants() {
        let (images, labels) = tiny_idx(2, 28, 200);
        let ds = parse_idx(&images, &labels, "mem").unwrap();
        let small = ds.downsample_2x();
        assert_eq!(small.side(), 14);
        for &v in small.image(0) {
            assert!((v - 200.0 / 255.0).abs() < 1e-12);
        }
    }

    #[test]
    fn synthetic_corpus_parses_and_varies_by_class() {
        let (images, labels) = synthetic_digits_idx(64, 7);
        let ds = parse_idx(&images, &labels, "synthetic").unwrap();
        assert_eq!(ds.len(), 64);
        assert_eq!(ds.side(), 28);
        // images are in range and not blank
        let mass: f64 = ds.image(0).iter().sum();
        assert!(mass > 1.0, "first image should have ink, sum {mass}");
        assert!(ds.image(0).iter().all(|&v| (0.0..=1.0).contains(&v)));
        // determinism
        let (images2, labels2) = synthetic_digits_idx(64, 7);
        assert_eq!(images, images2);
        assert_eq!(labels, labels2);
    }
}
