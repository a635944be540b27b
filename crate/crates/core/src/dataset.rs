//! Bit-exact on-disk dataset format.
//!
//! A dataset is a directory with `manifest.json` at its root and one
//! subdirectory per scene containing:
//!
//! * `scene.json` — scene id, provenance seed, grid stride
//! * `image.ppm` — binary P6, 8-bit RGB
//! * `masks.bin` — magic `MSKG`, version u32, Gh u32, Gw u32, then Gh*Gw
//!   little-endian u16 ids
//! * `future_<k>.bin` — magic `TGRD`, version u32, T u32, Gh u32, Gw u32,
//!   then T*Gh*Gw*2 little-endian f32 in `[t][h][w][x,y]` order
//!
//! All integers are little-endian. The layout is pinned by golden-file
//! tests; any change must bump `FORMAT_VERSION`.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ImageRaster, ObjectMaskGrid, SceneRecord, TrajectoryGrid};

pub const FORMAT_VERSION: u32 = 1;
pub const TGRD_MAGIC: &[u8; 4] = b"TGRD";
pub const MSKG_MAGIC: &[u8; 4] = b"MSKG";

/// Dataset-level metadata, stored as `manifest.json`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    pub frames: usize,
    pub grid_height: usize,
    pub grid_width: usize,
    pub futures_per_scene: usize,
    pub scenes: Vec<SceneEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SceneEntry {
    pub id: String,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneMeta {
    scene_id: String,
    seed: u64,
    stride: usize,
}

impl DatasetManifest {
    pub fn write(&self, root: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(root.join("manifest.json"), text)?;
        Ok(())
    }

    pub fn read(root: &Path) -> Result<Self> {
        let text = fs::read_to_string(root.join("manifest.json"))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "manifest version {} (expected {})",
                manifest.format_version, FORMAT_VERSION
            )));
        }
        Ok(manifest)
    }
}

/// Read handle on a dataset directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let manifest = DatasetManifest::read(&root)?;
        Ok(Self { root, manifest })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.manifest.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.scenes.is_empty()
    }

    pub fn scene_dir(&self, index: usize) -> PathBuf {
        self.root.join(&self.manifest.scenes[index].id)
    }

    pub fn scene(&self, index: usize) -> Result<SceneRecord> {
        read_scene(&self.scene_dir(index))
    }
}

/// Writes one scene directory. The record must satisfy its invariants.
/// Coordinates are stored as little-endian f32; callers that need bit-exact
/// roundtrips must hold f32-representable coordinates (everything the
/// simulator and samplers emit is quantized accordingly).
pub fn write_scene(record: &SceneRecord, dir: &Path) -> Result<()> {
    record.validate()?;
    fs::create_dir_all(dir)?;
    let meta = SceneMeta {
        scene_id: record.scene_id.clone(),
        seed: record.seed,
        stride: record.futures[0].stride(),
    };
    let mut text = serde_json::to_string_pretty(&meta)?;
    text.push('\n');
    fs::write(dir.join("scene.json"), text)?;
    write_ppm(&record.image, &dir.join("image.ppm"))?;
    write_masks(&record.masks, &dir.join("masks.bin"))?;
    for (k, fut) in record.futures.iter().enumerate() {
        write_tgrd(fut, &dir.join(format!("future_{k}.bin")))?;
    }
    Ok(())
}

/// Reads a scene directory written by [`write_scene`].
pub fn read_scene(dir: &Path) -> Result<SceneRecord> {
    let text = fs::read_to_string(dir.join("scene.json"))?;
    let meta: SceneMeta = serde_json::from_str(&text)?;
    let image = read_ppm(&dir.join("image.ppm"))?;
    let masks = read_masks(&dir.join("masks.bin"))?;
    let mut futures = Vec::new();
    loop {
        let path = dir.join(format!("future_{}.bin", futures.len()));
        if !path.exists() {
            break;
        }
        let grid = read_tgrd(&path, meta.stride)?;
        if (grid.grid_h(), grid.grid_w()) != (masks.grid_h(), masks.grid_w()) {
            return Err(Error::HeaderMismatch(format!(
                "future grid ({}, {}) disagrees with mask grid ({}, {})",
                grid.grid_h(),
                grid.grid_w(),
                masks.grid_h(),
                masks.grid_w()
            )));
        }
        futures.push(grid);
    }
    if futures.is_empty() {
        return Err(Error::Validation(format!(
            "scene {} has no future files",
            meta.scene_id
        )));
    }
    let record = SceneRecord {
        image,
        futures,
        masks,
        seed: meta.seed,
        scene_id: meta.scene_id,
    };
    record.validate()?;
    Ok(record)
}

pub fn write_tgrd(grid: &TrajectoryGrid, path: &Path) -> Result<()> {
    let (t, gh, gw, _) = grid.data().dim();
    let mut buf = Vec::with_capacity(20 + t * gh * gw * 2 * 4);
    buf.extend_from_slice(TGRD_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(t as u32).to_le_bytes());
    buf.extend_from_slice(&(gh as u32).to_le_bytes());
    buf.extend_from_slice(&(gw as u32).to_le_bytes());
    for v in grid.data().iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_tgrd(path: &Path, stride: usize) -> Result<TrajectoryGrid> {
    let bytes = fs::read(path)?;
    let mut r = ByteReader::new(&bytes, path);
    r.expect_magic(TGRD_MAGIC)?;
    r.expect_version()?;
    let t = r.read_u32()? as usize;
    let gh = r.read_u32()? as usize;
    let gw = r.read_u32()? as usize;
    let n = t * gh * gw * 2;
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        values.push(r.read_f32()? as f64);
    }
    r.expect_end()?;
    let data = Array4::from_shape_vec((t, gh, gw, 2), values)
        .map_err(|e| Error::HeaderMismatch(format!("{}: {e}", path.display())))?;
    TrajectoryGrid::new(data, stride)
}

pub fn write_masks(masks: &ObjectMaskGrid, path: &Path) -> Result<()> {
    let (gh, gw) = masks.ids().dim();
    let mut buf = Vec::with_capacity(16 + gh * gw * 2);
    buf.extend_from_slice(MSKG_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(gh as u32).to_le_bytes());
    buf.extend_from_slice(&(gw as u32).to_le_bytes());
    for id in masks.ids().iter() {
        buf.extend_from_slice(&id.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_masks(path: &Path) -> Result<ObjectMaskGrid> {
    let bytes = fs::read(path)?;
    let mut r = ByteReader::new(&bytes, path);
    r.expect_magic(MSKG_MAGIC)?;
    r.expect_version()?;
    let gh = r.read_u32()? as usize;
    let gw = r.read_u32()? as usize;
    let mut ids = Vec::with_capacity(gh * gw);
    for _ in 0..gh * gw {
        ids.push(r.read_u16()?);
    }
    r.expect_end()?;
    let ids = Array2::from_shape_vec((gh, gw), ids)
        .map_err(|e| Error::HeaderMismatch(format!("{}: {e}", path.display())))?;
    ObjectMaskGrid::new(ids)
}

/// Binary P6 with maxval 255, exactly the subset this crate writes.
pub fn write_ppm(image: &ImageRaster, path: &Path) -> Result<()> {
    let mut file = fs::File::create(path)?;
    write!(file, "P6\n{} {}\n255\n", image.width(), image.height())?;
    file.write_all(&image.to_rgb8())?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<ImageRaster> {
    let bytes = fs::read(path)?;
    if !bytes.starts_with(b"P6\n") {
        return Err(Error::Format(format!("{}: not a binary PPM", path.display())));
    }
    let header_end = bytes
        .iter()
        .enumerate()
        .skip(3)
        .filter(|(_, &b)| b == b'\n')
        .map(|(i, _)| i)
        .nth(1)
        .ok_or_else(|| Error::Truncated(format!("{}: incomplete PPM header", path.display())))?;
    let header = std::str::from_utf8(&bytes[3..header_end])
        .map_err(|_| Error::Format(format!("{}: non-ASCII PPM header", path.display())))?;
    let fields: Vec<&str> = header.split_ascii_whitespace().collect();
    if fields.len() != 3 || fields[2] != "255" {
        return Err(Error::Format(format!(
            "{}: expected 'W H 255' header, got {header:?}",
            path.display()
        )));
    }
    let width: usize = fields[0]
        .parse()
        .map_err(|_| Error::Format(format!("{}: bad width", path.display())))?;
    let height: usize = fields[1]
        .parse()
        .map_err(|_| Error::Format(format!("{}: bad height", path.display())))?;
    let payload = &bytes[header_end + 1..];
    if payload.len() < height * width * 3 {
        return Err(Error::Truncated(format!(
            "{}: PPM payload has {} of {} bytes",
            path.display(),
            payload.len(),
            height * width * 3
        )));
    }
    if payload.len() > height * width * 3 {
        return Err(Error::HeaderMismatch(format!(
            "{}: trailing bytes after PPM payload",
            path.display()
        )));
    }
    ImageRaster::from_rgb8(payload, height, width)
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> ByteReader<'a> {
    fn new(bytes: &'a [u8], path: &Path) -> Self {
        Self {
            bytes,
            pos: 0,
            path: path.display().to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated(format!(
                "{}: needed {} bytes at offset {}, file has {}",
                self.path,
                n,
                self.pos,
                self.bytes.len()
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn expect_magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != magic {
            return Err(Error::Format(format!(
                "{}: bad magic {:?} (expected {:?})",
                self.path,
                got,
                std::str::from_utf8(magic).unwrap()
            )));
        }
        Ok(())
    }

    fn expect_version(&mut self) -> Result<()> {
        let v = self.read_u32()?;
        if v != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "{}: format version {v} (expected {FORMAT_VERSION})",
                self.path
            )));
        }
        Ok(())
    }

    fn read_u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn read_u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn read_f32(&mut self) -> Result<f32> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn expect_end(&mut self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::HeaderMismatch(format!(
                "{}: {} trailing bytes after payload",
                self.path,
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// Reads exactly `n` bytes from a reader, mapping EOF to a truncation error.
#[allow(dead_code)]
pub(crate) fn read_exact_n(reader: &mut impl Read, n: usize, what: &str) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    reader
        .read_exact(&mut buf)
        .map_err(|_| Error::Truncated(format!("{what}: short read of {n} bytes")))?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use tempfile::tempdir;

    pub(crate) fn random_record(seed: u64, t_len: usize, gh: usize, gw: usize, k: usize) -> SceneRecord {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = gh * 2;
        let w = gw * 2;
        let image = ImageRaster::from_rgb8(
            &(0..h * w * 3).map(|_| rng.gen::<u8>()).collect::<Vec<_>>(),
            h,
            w,
        )
        .unwrap();
        let mut masks = Array2::zeros((gh, gw));
        for id in masks.iter_mut() {
            *id = rng.gen_range(0..3u16);
        }
        let mut futures = Vec::new();
        let mut frame0 = TrajectoryGrid::at_anchors(1, gh, gw, 2);
        frame0.quantize_f32();
        for _ in 0..k {
            let mut grid = TrajectoryGrid::at_anchors(t_len, gh, gw, 2);
            for t in 1..t_len {
                for i in 0..gh {
                    for j in 0..gw {
                        for c in 0..2 {
                            grid.data_mut()[[t, i, j, c]] = rng.gen_range(-100.0f64..100.0);
                        }
                    }
                }
            }
            grid.quantize_f32();
            // futures share the frame-0 anchor slice by construction
            for i in 0..gh {
                for j in 0..gw {
                    for c in 0..2 {
                        grid.data_mut()[[0, i, j, c]] = frame0.data()[[0, i, j, c]];
                    }
                }
            }
            futures.push(grid);
        }
        SceneRecord {
            image,
            futures,
            masks: ObjectMaskGrid::new(masks).unwrap(),
            seed,
            scene_id: format!("scene_{seed:05}"),
        }
    }

    #[test]
    fn roundtrip_is_bitwise_exact() {
        let dir = tempdir().unwrap();
        let record = random_record(3, 4, 3, 5, 2);
        write_scene(&record, dir.path()).unwrap();
        let back = read_scene(dir.path()).unwrap();
        assert_eq!(record, back);
    }

    #[test]
    fn corrupt_magic_is_a_format_error() {
        let dir = tempdir().unwrap();
        let record = random_record(4, 2, 2, 2, 1);
        write_scene(&record, dir.path()).unwrap();
        let path = dir.path().join("future_0.bin");
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, bytes).unwrap();
        assert!(matches!(read_scene(dir.path()), Err(Error::Format(_))));
    }

    #[test]
    fn version_mismatch_is_a_format_error() {
        let dir = tempdir().unwrap();
        let record = random_record(5, 2, 2, 2, 1);
        write_scene(&record, dir.path()).unwrap();
        let path = dir.path().join("masks.bin");
        let mut bytes = fs::read(&path).unwrap();
        bytes[4] = 99;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(read_masks(&path), Err(Error::Format(_))));
    }

    #[test]
    fn short_payload_is_a_truncation_error() {
        let dir = tempdir().unwrap();
        let record = random_record(6, 3, 2, 2, 1);
        write_scene(&record, dir.path()).unwrap();
        let path = dir.path().join("future_0.bin");
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(
            read_tgrd(&path, 2),
            Err(Error::Truncated(_))
        ));
    }

    #[test]
    fn trailing_bytes_are_a_header_mismatch() {
        let dir = tempdir().unwrap();
        let record = random_record(7, 3, 2, 2, 1);
        write_scene(&record, dir.path()).unwrap();
        let path = dir.path().join("future_0.bin");
        let mut bytes = fs::read(&path).unwrap();
        bytes.extend_from_slice(&[0, 0, 0, 0]);
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            read_tgrd(&path, 2),
            Err(Error::HeaderMismatch(_))
        ));
    }

    #[test]
    fn ppm_roundtrip() {
        let dir = tempdir().unwrap();
        let mut pixels = Array3::zeros((2, 3, 3));
        pixels[[0, 0, 0]] = 1.0;
        pixels[[1, 2, 2]] = 128.0 / 255.0;
        let image = ImageRaster::new(pixels).unwrap();
        let path = dir.path().join("img.ppm");
        write_ppm(&image, &path).unwrap();
        let back = read_ppm(&path).unwrap();
        assert_eq!(image, back);
    }
}
