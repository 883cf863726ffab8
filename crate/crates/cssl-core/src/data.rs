//! Synthetic two-domain grayscale datasets, patchification, and masking.
//!
//! Each image is a latent "anatomy" field (a handful of smooth blobs plus
//! noise) pushed through a per-domain window transfer
//! `clamp((x - center + width/2) / width, 0, 1)`, so the two domains share
//! structure but differ in intensity distribution — the same way two CT
//! window settings render one scan differently. Labels, when requested,
//! come from the parity of the latent blob count, so a ground-truth binary
//! task exists without any external data.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Blob count range for the latent field; parity of the draw is the label.
/// The narrow range keeps the parity task learnable at desk scale.
const MIN_BLOBS: u64 = 2;
const MAX_BLOBS: u64 = 3;

/// How fine-tune labels are derived from the latent field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelRule {
    None,
    BlobCountParity,
}

/// One synthetic imaging domain: a window transfer over the shared latent
/// anatomy plus a texture scale for the additive noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub window_center: f64,
    pub window_width: f64,
    pub texture_seed_scale: f64,
    pub label_rule: LabelRule,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.window_width > 0.0) {
            return Err(Error::invalid(format!(
                "window_width must be > 0, got {}",
                self.window_width
            )));
        }
        Ok(())
    }

    /// Narrow-window domain (soft-tissue-like rendering). Unlabeled.
    pub fn default_first() -> Self {
        DomainSpec {
            window_center: 0.35,
            window_width: 0.5,
            texture_seed_scale: 1.0,
            label_rule: LabelRule::None,
        }
    }

    /// Wide-window domain (air/lung-like rendering). Unlabeled.
    pub fn default_second() -> Self {
        DomainSpec {
            window_center: 0.75,
            window_width: 1.4,
            texture_seed_scale: 1.0,
            label_rule: LabelRule::None,
        }
    }

    /// Intermediate window used for the labeled fine-tune task.
    pub fn default_labeled() -> Self {
        DomainSpec {
            window_center: 0.5,
            window_width: 0.9,
            texture_seed_scale: 1.0,
            label_rule: LabelRule::BlobCountParity,
        }
    }
}

/// A batch of images, row-major `S x C x H x W`, values in [0, 1].
#[derive(Debug, Clone)]
pub struct ImageBatch {
    pub data: Vec<f64>,
    pub s: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub domain_id: u32,
    pub sample_ids: Vec<u64>,
}

impl ImageBatch {
    pub fn image(&self, i: usize) -> &[f64] {
        let stride = self.c * self.h * self.w;
        &self.data[i * stride..(i + 1) * stride]
    }

    pub fn pixel_count(&self) -> usize {
        self.s * self.c * self.h * self.w
    }
}

/// Per-image random mask over patch indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSpec {
    /// Total patches.
    pub n: usize,
    /// Masked patches, `m = floor(n * r)`.
    pub m: usize,
    /// Masked patch indices, sorted ascending, no duplicates.
    pub masked_indices: Vec<usize>,
}

impl MaskSpec {
    /// Mask nothing: every patch visible.
    pub fn none(n: usize) -> Self {
        MaskSpec {
            n,
            m: 0,
            masked_indices: Vec::new(),
        }
    }

    /// Visible patch indices, sorted ascending (complement of the mask).
    pub fn visible_indices(&self) -> Vec<usize> {
        let mut visible = Vec::with_capacity(self.n - self.m);
        let mut it = self.masked_indices.iter().peekable();
        for p in 0..self.n {
            if it.peek() == Some(&&p) {
                it.next();
            } else {
                visible.push(p);
            }
        }
        visible
    }

    pub fn is_masked(&self, patch: usize) -> bool {
        self.masked_indices.binary_search(&patch).is_ok()
    }
}

/// Draw `m = floor(n * r)` masked patch indices uniformly without
/// replacement. Deterministic per seed.
pub fn sample_mask(n: usize, r: f64, seed: u64) -> Result<MaskSpec> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::invalid(format!("mask ratio must be in [0,1], got {r}")));
    }
    let m = (n as f64 * r).floor() as usize;
    let mut rng = rng::rng_for(seed, rng::stream::MASK, 0);
    let masked_indices = rng::sample_without_replacement(&mut rng, n, m);
    Ok(MaskSpec {
        n,
        m,
        masked_indices,
    })
}

/// One image split into `n = (H/V)(W/V)` patches of `V*V*C` values each.
/// Row k holds the raster-scan k-th block, flattened row-major with the
/// channel index last. Checkpoints depend on this order.
#[derive(Debug, Clone)]
pub struct PatchGrid {
    pub v: usize,
    pub n: usize,
    /// `n x (V*V*C)`, row-major.
    pub patches: Vec<f64>,
}

impl PatchGrid {
    pub fn patch_dim(&self) -> usize {
        if self.n == 0 {
            0
        } else {
            self.patches.len() / self.n
        }
    }

    pub fn patch(&self, k: usize) -> &[f64] {
        let d = self.patch_dim();
        &self.patches[k * d..(k + 1) * d]
    }
}

/// Split one `C x H x W` image into non-overlapping `V x V` patches.
pub fn patchify(image: &[f64], c: usize, h: usize, w: usize, v: usize) -> Result<PatchGrid> {
    if v == 0 || h % v != 0 || w % v != 0 {
        return Err(Error::invalid(format!(
            "image {h}x{w} not divisible into {v}x{v} patches"
        )));
    }
    if image.len() != c * h * w {
        return Err(Error::ShapeMismatch(format!(
            "image buffer has {} values, expected {}",
            image.len(),
            c * h * w
        )));
    }
    let (gh, gw) = (h / v, w / v);
    let n = gh * gw;
    let pd = v * v * c;
    let mut patches = vec![0.0; n * pd];
    for gy in 0..gh {
        for gx in 0..gw {
            let k = gy * gw + gx;
            let out = &mut patches[k * pd..(k + 1) * pd];
            for dy in 0..v {
                for dx in 0..v {
                    for ch in 0..c {
                        let (y, x) = (gy * v + dy, gx * v + dx);
                        out[(dy * v + dx) * c + ch] = image[ch * h * w + y * w + x];
                    }
                }
            }
        }
    }
    Ok(PatchGrid { v, n, patches })
}

/// Exact inverse of [`patchify`].
pub fn unpatchify(grid: &PatchGrid, c: usize, h: usize, w: usize) -> Result<Vec<f64>> {
    let v = grid.v;
    if v == 0 || h % v != 0 || w % v != 0 || grid.n != (h / v) * (w / v) {
        return Err(Error::invalid(format!(
            "patch grid (n={}, v={v}) does not tile a {h}x{w} image",
            grid.n
        )));
    }
    let gw = w / v;
    let pd = v * v * c;
    let mut image = vec![0.0; c * h * w];
    for k in 0..grid.n {
        let (gy, gx) = (k / gw, k % gw);
        let patch = &grid.patches[k * pd..(k + 1) * pd];
        for dy in 0..v {
            for dx in 0..v {
                for ch in 0..c {
                    let (y, x) = (gy * v + dy, gx * v + dx);
                    image[ch * h * w + y * w + x] = patch[(dy * v + dx) * c + ch];
                }
            }
        }
    }
    Ok(image)
}

/// An in-memory dataset of single-channel images from one domain.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<Vec<f64>>,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub domain_id: u32,
    pub sample_ids: Vec<u64>,
    /// Per-sample label (present only when the domain's label rule is not
    /// `None`).
    pub labels: Vec<Option<u8>>,
    /// Per-image generator seeds, recorded in the manifest.
    pub seeds: Vec<u64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Gather the given sample positions into a contiguous batch.
    pub fn batch(&self, positions: &[usize]) -> ImageBatch {
        let stride = self.c * self.h * self.w;
        let mut data = Vec::with_capacity(positions.len() * stride);
        let mut sample_ids = Vec::with_capacity(positions.len());
        for &p in positions {
            data.extend_from_slice(&self.images[p]);
            sample_ids.push(self.sample_ids[p]);
        }
        ImageBatch {
            data,
            s: positions.len(),
            c: self.c,
            h: self.h,
            w: self.w,
            domain_id: self.domain_id,
            sample_ids,
        }
    }

    /// Subset in the order of the given sample ids (buffer materialization).
    pub fn subset_by_sample_ids(&self, ids: &[u64]) -> Result<Dataset> {
        let index: std::collections::HashMap<u64, usize> = self
            .sample_ids
            .iter()
            .enumerate()
            .map(|(pos, &id)| (id, pos))
            .collect();
        let mut positions = Vec::with_capacity(ids.len());
        for &id in ids {
            let &pos = index
                .get(&id)
                .ok_or_else(|| Error::invalid(format!("sample id {id} not in dataset")))?;
            positions.push(pos);
        }
        Ok(Dataset {
            images: positions.iter().map(|&p| self.images[p].clone()).collect(),
            c: self.c,
            h: self.h,
            w: self.w,
            domain_id: self.domain_id,
            sample_ids: ids.to_vec(),
            labels: positions.iter().map(|&p| self.labels[p]).collect(),
            seeds: positions.iter().map(|&p| self.seeds[p]).collect(),
        })
    }

    /// Labels as a dense vector; errors if any sample is unlabeled.
    pub fn dense_labels(&self) -> Result<Vec<u8>> {
        self.labels
            .iter()
            .enumerate()
            .map(|(i, l)| {
                l.ok_or_else(|| Error::invalid(format!("sample at position {i} has no label")))
            })
            .collect()
    }
}

/// Latent anatomy field for one image: smooth Gaussian blobs over a
/// coherent wave texture, plus a little unstructured noise. The texture is
/// spatially predictable (wavelengths above the patch scale), so masked
/// regions are inferable from visible ones; the iid noise is not, and sets
/// the reconstruction floor. Returns the field and the blob count used.
fn latent_field(h: usize, w: usize, texture_scale: f64, rng: &mut ChaCha8Rng) -> (Vec<f64>, u64) {
    let blobs = MIN_BLOBS + rng::below(rng, MAX_BLOBS - MIN_BLOBS + 1);
    let min_side = h.min(w) as f64;
    // Blobs share one size/brightness distribution regardless of count, but
    // a per-image background level is drawn wide enough to swamp global
    // intensity statistics: reading the count requires measuring blobs
    // against their local background. Centers keep a minimum separation so
    // blobs stay countable.
    let min_sep = 0.3 * min_side;
    let mut blob_params: Vec<(f64, f64, f64, f64)> = Vec::with_capacity(blobs as usize);
    for _ in 0..blobs {
        let mut cy = (0.15 + 0.7 * rng::uniform(rng)) * h as f64;
        let mut cx = (0.15 + 0.7 * rng::uniform(rng)) * w as f64;
        for _ in 0..50 {
            let far_enough = blob_params
                .iter()
                .all(|&(py, px, _, _)| ((cy - py).powi(2) + (cx - px).powi(2)).sqrt() >= min_sep);
            if far_enough {
                break;
            }
            cy = (0.15 + 0.7 * rng::uniform(rng)) * h as f64;
            cx = (0.15 + 0.7 * rng::uniform(rng)) * w as f64;
        }
        let sigma = (0.10 + 0.03 * rng::uniform(rng)) * min_side;
        let amp = 0.8 + 0.2 * rng::uniform(rng);
        blob_params.push((cy, cx, sigma, amp));
    }
    let background_level = 0.7 * (rng::uniform(rng) - 0.5);
    const WAVES: usize = 4;
    let mut wave_params = Vec::with_capacity(WAVES);
    for _ in 0..WAVES {
        let sign_y = if rng::uniform(rng) < 0.5 { -1.0 } else { 1.0 };
        let sign_x = if rng::uniform(rng) < 0.5 { -1.0 } else { 1.0 };
        let ky = sign_y * (1.0 + 4.0 * rng::uniform(rng));
        let kx = sign_x * (1.0 + 4.0 * rng::uniform(rng));
        let phase = std::f64::consts::TAU * rng::uniform(rng);
        let amp = (0.05 + 0.07 * rng::uniform(rng)) * texture_scale;
        wave_params.push((ky, kx, phase, amp));
    }
    let noise_amp = 0.02 * texture_scale;
    let mut field = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut value = background_level;
            for &(cy, cx, sigma, amp) in &blob_params {
                let dy = y as f64 + 0.5 - cy;
                let dx = x as f64 + 0.5 - cx;
                value += amp * (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
            }
            for &(ky, kx, phase, amp) in &wave_params {
                let arg = std::f64::consts::TAU * (ky * y as f64 + kx * x as f64) / min_side + phase;
                value += amp * arg.cos();
            }
            field[y * w + x] = value;
        }
    }
    // Noise drawn after the deterministic terms so the field shape and the
    // noise are independent of each other's draw counts.
    for p in field.iter_mut() {
        *p += noise_amp * (2.0 * rng::uniform(rng) - 1.0);
    }
    (field, blobs)
}

/// Window transfer mapping the latent field into display range [0, 1].
fn apply_window(latent: &[f64], spec: &DomainSpec) -> Vec<f64> {
    latent
        .iter()
        .map(|&x| {
            ((x - spec.window_center + spec.window_width / 2.0) / spec.window_width).clamp(0.0, 1.0)
        })
        .collect()
}

/// Generate a deterministic synthetic dataset for one domain.
///
/// Per-image seeds derive from `(seed, sample index)`, never from worker
/// identity, so the result is reproducible regardless of how generation is
/// scheduled.
pub fn generate_domain_dataset(
    spec: &DomainSpec,
    count: usize,
    image_size: (usize, usize),
    seed: u64,
    domain_id: u32,
) -> Result<Dataset> {
    spec.validate()?;
    let (h, w) = image_size;
    if h < 8 || w < 8 {
        return Err(Error::invalid(format!(
            "image size must be at least 8x8, got {h}x{w}"
        )));
    }
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    let mut seeds = Vec::with_capacity(count);
    for i in 0..count {
        let image_seed = rng::mix_seed(seed, rng::stream::DATA_IMAGE, i as u64);
        let mut rng = rand_core::SeedableRng::seed_from_u64(image_seed);
        let (latent, blobs) = latent_field(h, w, spec.texture_seed_scale, &mut rng);
        images.push(apply_window(&latent, spec));
        labels.push(match spec.label_rule {
            LabelRule::None => None,
            LabelRule::BlobCountParity => Some((blobs % 2) as u8),
        });
        seeds.push(image_seed);
    }
    Ok(Dataset {
        images,
        c: 1,
        h,
        w,
        domain_id,
        sample_ids: (0..count as u64).collect(),
        labels,
        seeds,
    })
}

// ---------------------------------------------------------------------------
// Export / import: PNG files + line-delimited manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRecord {
    sample_id: u64,
    domain_id: u32,
    label: Option<u8>,
    seed: u64,
}

fn image_file_name(sample_id: u64) -> String {
    format!("img_{sample_id:06}.png")
}

/// Write a dataset as 16-bit grayscale PNGs plus `manifest.jsonl`.
pub fn export_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    if dataset.c != 1 {
        return Err(Error::invalid(
            "PNG export supports single-channel images only",
        ));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest_path = dir.join("manifest.jsonl");
    let mut manifest = BufWriter::new(
        fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?,
    );
    for i in 0..dataset.len() {
        let record = ManifestRecord {
            sample_id: dataset.sample_ids[i],
            domain_id: dataset.domain_id,
            label: dataset.labels[i],
            seed: dataset.seeds[i],
        };
        let line = serde_json::to_string(&record)
            .map_err(|e| Error::parse(&manifest_path, e.to_string()))?;
        writeln!(manifest, "{line}").map_err(|e| Error::io(&manifest_path, e))?;

        let path = dir.join(image_file_name(dataset.sample_ids[i]));
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut encoder = png::Encoder::new(BufWriter::new(file), dataset.w as u32, dataset.h as u32);
        encoder.set_color(png::ColorType::Grayscale);
        encoder.set_depth(png::BitDepth::Sixteen);
        let mut writer = encoder
            .write_header()
            .map_err(|e| Error::parse(&path, e.to_string()))?;
        let mut bytes = Vec::with_capacity(dataset.h * dataset.w * 2);
        for &value in &dataset.images[i] {
            let q = (value.clamp(0.0, 1.0) * 65535.0).round() as u16;
            bytes.extend_from_slice(&q.to_be_bytes());
        }
        writer
            .write_image_data(&bytes)
            .map_err(|e| Error::parse(&path, e.to_string()))?;
    }
    manifest.flush().map_err(|e| Error::io(&manifest_path, e))?;
    Ok(())
}

/// Load a dataset directory written by [`export_dataset`]. Pixel values are
/// the 16-bit quantized ones; ordering follows the manifest.
pub fn import_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.jsonl");
    if !manifest_path.is_file() {
        return Err(Error::MissingArtifact {
            path: manifest_path,
            produced_by: "gen-data".into(),
        });
    }
    let file = fs::File::open(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&manifest_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord = serde_json::from_str(&line)
            .map_err(|e| Error::parse(&manifest_path, format!("line {}: {e}", lineno + 1)))?;
        records.push(record);
    }

    let mut images = Vec::with_capacity(records.len());
    let (mut h, mut w) = (0usize, 0usize);
    let mut domain_id = 0;
    let mut sample_ids = Vec::new();
    let mut labels = Vec::new();
    let mut seeds = Vec::new();
    for record in &records {
        let path = dir.join(image_file_name(record.sample_id));
        let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let decoder = png::Decoder::new(BufReader::new(file));
        let mut reader = decoder
            .read_info()
            .map_err(|e| Error::parse(&path, e.to_string()))?;
        let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| Error::parse(&path, e.to_string()))?;
        if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Sixteen
        {
            return Err(Error::parse(&path, "expected 16-bit grayscale PNG"));
        }
        let (iw, ih) = (info.width as usize, info.height as usize);
        if images.is_empty() {
            (h, w) = (ih, iw);
            domain_id = record.domain_id;
        } else if (ih, iw) != (h, w) {
            return Err(Error::parse(&path, "inconsistent image dimensions"));
        }
        let mut pixels = Vec::with_capacity(ih * iw);
        for chunk in buf[..info.buffer_size()].chunks_exact(2) {
            let q = u16::from_be_bytes([chunk[0], chunk[1]]);
            pixels.push(q as f64 / 65535.0);
        }
        images.push(pixels);
        sample_ids.push(record.sample_id);
        labels.push(record.label);
        seeds.push(record.seed);
    }
    Ok(Dataset {
        images,
        c: 1,
        h,
        w,
        domain_id,
        sample_ids,
        labels,
        seeds,
    })
}

/// Convenience: per-sample-id label map from a dataset directory (used by
/// consumers that only need the manifest).
pub fn manifest_labels(dir: &Path) -> Result<BTreeMap<u64, Option<u8>>> {
    let dataset = import_dataset(dir)?;
    Ok(dataset
        .sample_ids
        .iter()
        .copied()
        .zip(dataset.labels.iter().copied())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn any_spec() -> DomainSpec {
        DomainSpec::default_first()
    }

    #[test]
    fn empty_dataset() {
        let d = generate_domain_dataset(&any_spec(), 0, (32, 32), 5, 0).unwrap();
        assert!(d.is_empty());
    }

    #[test]
    fn generator_is_deterministic() {
        let a = generate_domain_dataset(&any_spec(), 5, (32, 32), 7, 0).unwrap();
        let b = generate_domain_dataset(&any_spec(), 5, (32, 32), 7, 0).unwrap();
        for (x, y) in a.images.iter().zip(b.images.iter()) {
            // Byte-for-byte equality of per-pixel f64 values.
            let xb: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u64> = y.iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.seeds, b.seeds);
    }

    #[test]
    fn generator_rejects_tiny_images() {
        assert!(generate_domain_dataset(&any_spec(), 1, (4, 32), 7, 0).is_err());
        assert!(generate_domain_dataset(&any_spec(), 1, (32, 4), 7, 0).is_err());
    }

    #[test]
    fn pixels_in_unit_interval() {
        let d = generate_domain_dataset(&any_spec(), 8, (32, 32), 3, 0).unwrap();
        for image in &d.images {
            assert!(image.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    /// Regression fixture: the default domain pair separates mean intensity
    /// by more than 0.05 over 256 images each. Values recorded from the
    /// implemented generator.
    #[test]
    fn default_domains_separate_mean_intensity() {
        let mean = |spec: &DomainSpec, domain: u32| {
            let d = generate_domain_dataset(spec, 256, (32, 32), 17, domain).unwrap();
            let total: f64 = d.images.iter().flat_map(|im| im.iter()).sum();
            total / (d.len() * d.h * d.w) as f64
        };
        let m1 = mean(&DomainSpec::default_first(), 0);
        let m2 = mean(&DomainSpec::default_second(), 1);
        assert!(
            (m1 - m2).abs() > 0.05,
            "domain means too close: {m1} vs {m2}"
        );
        // Frozen fixture values for the default pair at seed 17.
        assert!((m1 - 0.20693).abs() < 0.02, "first-domain mean drifted: {m1}");
        assert!((m2 - 0.10394).abs() < 0.02, "second-domain mean drifted: {m2}");
    }

    #[test]
    fn blob_parity_labels_present_and_binary() {
        let spec = DomainSpec::default_labeled();
        let d = generate_domain_dataset(&spec, 64, (32, 32), 11, 2).unwrap();
        for label in &d.labels {
            assert!(matches!(label, Some(0) | Some(1)));
        }
        // Both classes occur.
        let ones: usize = d.labels.iter().map(|l| l.unwrap() as usize).sum();
        assert!(ones > 0 && ones < 64);
    }

    #[test]
    fn patch_count_arithmetic() {
        let image = vec![0.0; 32 * 32];
        assert_eq!(patchify(&image, 1, 32, 32, 8).unwrap().n, 16);
        let big = vec![0.0; 512 * 512];
        assert_eq!(patchify(&big, 1, 512, 512, 16).unwrap().n, 1024);
    }

    #[test]
    fn patchify_rejects_indivisible() {
        let image = vec![0.0; 30 * 32];
        assert!(patchify(&image, 1, 30, 32, 8).is_err());
    }

    #[test]
    fn patchify_roundtrip_exact() {
        for seed in 0..5u64 {
            let d = generate_domain_dataset(&any_spec(), 1, (32, 32), seed, 0).unwrap();
            for v in [2usize, 4, 8, 16] {
                let grid = patchify(&d.images[0], 1, 32, 32, v).unwrap();
                let back = unpatchify(&grid, 1, 32, 32).unwrap();
                assert_eq!(d.images[0], back, "v={v}");
            }
        }
    }

    #[test]
    fn patchify_block_layout() {
        // 4x4 image, V=2: patch 1 must be the top-right 2x2 block in
        // raster order.
        let image: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let grid = patchify(&image, 1, 4, 4, 2).unwrap();
        assert_eq!(grid.patch(1), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(grid.patch(2), &[8.0, 9.0, 12.0, 13.0]);
    }

    #[test]
    fn mask_counts() {
        assert_eq!(sample_mask(16, 0.75, 1).unwrap().m, 12);
        assert_eq!(sample_mask(16, 0.0, 1).unwrap().m, 0);
        assert_eq!(sample_mask(10, 0.75, 1).unwrap().m, 7);
        assert!(sample_mask(16, 1.5, 1).is_err());
        assert!(sample_mask(16, -0.1, 1).is_err());
    }

    #[test]
    fn mask_indices_sorted_in_range() {
        for seed in 0..50 {
            let mask = sample_mask(16, 0.75, seed).unwrap();
            assert_eq!(mask.masked_indices.len(), 12);
            for w in mask.masked_indices.windows(2) {
                assert!(w[0] < w[1]);
            }
            assert!(mask.masked_indices.iter().all(|&i| i < 16));
            let visible = mask.visible_indices();
            assert_eq!(visible.len(), 4);
            for p in &visible {
                assert!(!mask.is_masked(*p));
            }
        }
    }

    #[test]
    fn mask_is_uniform_over_seeds() {
        let mut counts = [0usize; 16];
        let trials = 10_000;
        for seed in 0..trials {
            for &i in &sample_mask(16, 0.5, seed).unwrap().masked_indices {
                counts[i] += 1;
            }
        }
        for (i, &count) in counts.iter().enumerate() {
            let freq = count as f64 / trials as f64;
            assert!(
                (freq - 0.5).abs() < 0.02,
                "index {i} masked with frequency {freq}"
            );
        }
    }

    #[test]
    fn export_import_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DomainSpec::default_labeled();
        let d = generate_domain_dataset(&spec, 6, (16, 16), 23, 3).unwrap();
        export_dataset(&d, dir.path()).unwrap();
        let loaded = import_dataset(dir.path()).unwrap();
        assert_eq!(loaded.len(), 6);
        assert_eq!(loaded.sample_ids, d.sample_ids);
        assert_eq!(loaded.labels, d.labels);
        assert_eq!(loaded.seeds, d.seeds);
        assert_eq!(loaded.domain_id, 3);
        // Pixels survive up to 16-bit quantization.
        for (a, b) in loaded.images[0].iter().zip(d.images[0].iter()) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-12);
        }
    }

    #[test]
    fn import_missing_manifest_names_producer() {
        let dir = tempfile::tempdir().unwrap();
        let err = import_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("gen-data"), "{err}");
    }
}
