//! File formats: indexed-colour PNG, the checkpoint archive and content
//! hashing.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! "CQCK"                     magic
//! u32                        format version (1)
//! u64, [u8]                  manifest length, manifest JSON
//! u32                        tensor count
//! per tensor:
//!   u16, [u8]                name length, UTF-8 name
//!   u8, [u64]                rank, dimensions
//!   [f64]                    values, row-major
//! [u8; 32]                   SHA-256 of every preceding byte
//! ```

use std::io::Cursor;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::colour::{to_byte, RgbImage};
use crate::cqformer::{CqFormer, CqFormerConfig, IndexMap, Palette};
use crate::error::{input_err, Error, Result};
use crate::nn::ParamStore;
use crate::recognition::{ClassifierConfig, SmallCnn};

/// Smallest PNG palette bit depth holding `colours` entries.
pub fn png_bit_depth(colours: usize) -> Result<u8> {
    match colours {
        0..=2 => Ok(1),
        3..=4 => Ok(2),
        5..=16 => Ok(4),
        17..=256 => Ok(8),
        _ => Err(input_err(format!("{colours} colours do not fit an indexed PNG"))),
    }
}

/// Encodes an index map and palette as a palette-based PNG.
pub fn encode_indexed_png(index: &IndexMap, palette: &Palette) -> Result<Vec<u8>> {
    if palette.is_empty() {
        return Err(input_err("cannot write an empty palette"));
    }
    if index.data.iter().any(|&i| i >= palette.len()) {
        return Err(input_err("index map refers past the palette"));
    }
    let depth = png_bit_depth(palette.len())?;
    let (h, w) = (index.height, index.width);
    let per_byte = 8 / depth as usize;
    let stride = w.div_ceil(per_byte);
    let mut packed = vec![0u8; stride * h];
    for r in 0..h {
        for c in 0..w {
            let v = index.data[r * w + c] as u8;
            let shift = 8 - depth as usize * (c % per_byte + 1);
            packed[r * stride + c / per_byte] |= v << shift;
        }
    }
    let plte: Vec<u8> = palette.colours.iter().flat_map(|c| c.map(to_byte)).collect();
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Indexed);
        enc.set_depth(match depth {
            1 => png::BitDepth::One,
            2 => png::BitDepth::Two,
            4 => png::BitDepth::Four,
            _ => png::BitDepth::Eight,
        });
        enc.set_palette(plte);
        let mut writer = enc.write_header().map_err(|e| Error::Format(e.to_string()))?;
        writer.write_image_data(&packed).map_err(|e| Error::Format(e.to_string()))?;
        writer.finish().map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(out)
}

/// A decoded indexed PNG.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexedPng {
    pub bit_depth: u8,
    pub palette: Vec<[u8; 3]>,
    pub index: IndexMap,
}

impl IndexedPng {
    pub fn to_rgb8(&self) -> image::RgbImage {
        let raw = self.index.data.iter().flat_map(|&i| self.palette[i]).collect();
        image::RgbImage::from_raw(self.index.width as u32, self.index.height as u32, raw).expect("dimensions match")
    }
}

pub fn decode_indexed_png(bytes: &[u8]) -> Result<IndexedPng> {
    let fmt = |e: png::DecodingError| Error::Format(e.to_string());
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(fmt)?;
    let info = reader.info();
    if info.color_type != png::ColorType::Indexed {
        return Err(Error::Format(format!("expected an indexed PNG, found {:?}", info.color_type)));
    }
    let depth = info.bit_depth as u8;
    let palette: Vec<[u8; 3]> = info.palette.as_ref().map(|p| p.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()).unwrap_or_default();
    let (w, h) = (info.width as usize, info.height as usize);
    let mut buf = vec![0u8; reader.output_buffer_size().ok_or_else(|| Error::Format("image too large".into()))?];
    let frame = reader.next_frame(&mut buf).map_err(fmt)?;
    let stride = frame.line_size;
    let per_byte = 8 / depth as usize;
    let mask = ((1u16 << depth) - 1) as u8;
    let mut data = Vec::with_capacity(w * h);
    for r in 0..h {
        for c in 0..w {
            let byte = buf[r * stride + c / per_byte];
            let shift = 8 - depth as usize * (c % per_byte + 1);
            data.push(((byte >> shift) & mask) as usize);
        }
    }
    let index = IndexMap::new(h, w, palette.len(), data).map_err(|e| Error::Format(e.to_string()))?;
    Ok(IndexedPng { bit_depth: depth, palette, index })
}

pub fn write_indexed_png(path: &Path, index: &IndexMap, palette: &Palette) -> Result<()> {
    std::fs::write(path, encode_indexed_png(index, palette)?)?;
    Ok(())
}

/// `index,r,g,b` with 0–255 channel values.
pub fn palette_csv(palette: &Palette) -> String {
    let mut out = String::from("index,r,g,b\n");
    for (i, c) in palette.colours.iter().enumerate() {
        let [r, g, b] = c.map(to_byte);
        out.push_str(&format!("{i},{r},{g},{b}\n"));
    }
    out
}

pub fn write_rgb_png(path: &Path, img: &RgbImage) -> Result<()> {
    img.to_rgb8().save(path)?;
    Ok(())
}

/// Git-style blob hash (`SHA-256("blob <len>\0" ‖ bytes)`), hex encoded.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex(&h.finalize())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

const MAGIC: &[u8; 4] = b"CQCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub quantiser: CqFormerConfig,
    pub tau: f64,
    pub classifier: Option<ClassifierConfig>,
    /// Completed epochs.
    pub epoch: usize,
    /// Free-form run state (configuration, metric history).
    #[serde(default)]
    pub extra: serde_json::Value,
}

/// Named tensors plus a manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(manifest: CheckpointManifest) -> Self {
        Self { manifest, tensors: Vec::new() }
    }

    pub fn push_store(&mut self, prefix: &str, store: &ParamStore) {
        for (name, t) in store.iter() {
            self.tensors.push((format!("{prefix}{name}"), t.clone()));
        }
    }

    pub fn push_tensors(&mut self, prefix: &str, store: &ParamStore, tensors: &[Tensor]) {
        for ((name, _), t) in store.iter().zip(tensors) {
            self.tensors.push((format!("{prefix}{name}"), t.clone()));
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.tensors.iter().any(|(n, _)| n.starts_with(prefix))
    }

    /// Fills `store` from tensors named `prefix + name`.
    pub fn load_store(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        store.load_named(|name| self.get(&format!("{prefix}{name}"))).map_err(Error::Format)
    }

    /// Tensors named `prefix + name` in `store` order.
    pub fn tensors_like(&self, prefix: &str, store: &ParamStore) -> Result<Vec<Tensor>> {
        store
            .iter()
            .map(|(name, t)| {
                let found = self.get(&format!("{prefix}{name}")).ok_or_else(|| Error::Format(format!("missing tensor {prefix}{name}")))?;
                if found.shape() != t.shape() {
                    return Err(Error::Format(format!("tensor {prefix}{name} has shape {:?}", found.shape())));
                }
                Ok(found.clone())
            })
            .collect()
    }

    pub fn quantiser(&self) -> Result<CqFormer> {
        let mut model = CqFormer::new(self.manifest.quantiser.clone())?;
        self.load_store(QUANTISER, model.params_mut())?;
        Ok(model)
    }

    pub fn classifier(&self) -> Result<Option<SmallCnn>> {
        let Some(cfg) = &self.manifest.classifier else { return Ok(None) };
        let mut cnn = SmallCnn::new(cfg.clone())?;
        self.load_store(CLASSIFIER, cnn.params_mut())?;
        Ok(Some(cnn))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let manifest = serde_json::to_vec(&self.manifest)?;
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let name_len = u16::try_from(name.len()).map_err(|_| input_err("tensor name too long"))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, at: 0 };
        if r.take(4)? != MAGIC {
            return Err(r.corrupt_at(0, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.corrupt_at(4, &format!("unsupported version {version}")));
        }
        if bytes.len() < 32 + 4 {
            return Err(r.corrupt_at(bytes.len(), "file too short"));
        }
        let body = bytes.len() - 32;
        if Sha256::digest(&bytes[..body]).as_slice() != &bytes[body..] {
            return Err(r.corrupt_at(body, "checksum mismatch"));
        }
        let r = &mut ByteReader { bytes: &bytes[..body], at: 8 };
        let len = r.u64()? as usize;
        let at = r.at;
        let manifest: CheckpointManifest =
            serde_json::from_slice(r.take(len)?).map_err(|e| r.corrupt_at(at, &format!("bad manifest: {e}")))?;
        let count = r.u32()?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let at = r.at;
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| r.corrupt_at(at, "tensor name is not UTF-8"))?;
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| r.corrupt_at(at, "tensor too large"))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push((name, Tensor::new(shape, data)));
        }
        if r.at != body {
            return Err(r.corrupt_at(r.at, "trailing bytes after tensors"));
        }
        Ok(Self { manifest, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

pub const QUANTISER: &str = "quantiser.";
pub const CLASSIFIER: &str = "classifier.";
pub const OPTIM_QUANTISER: &str = "optim.quantiser.";
pub const OPTIM_CLASSIFIER: &str = "optim.classifier.";

struct ByteReader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> ByteReader<'a> {
    fn corrupt_at(&self, offset: usize, message: &str) -> Error {
        Error::Corrupt { offset: offset as u64, message: message.to_string() }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(self.corrupt_at(self.at, "unexpected end of data"));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cqformer::{EncoderConfig, PaletteMode};
    use proptest::prelude::*;

    #[test]
    fn bit_depths() {
        assert_eq!(png_bit_depth(1).unwrap(), 1);
        assert_eq!(png_bit_depth(2).unwrap(), 1);
        assert_eq!(png_bit_depth(3).unwrap(), 2);
        assert_eq!(png_bit_depth(8).unwrap(), 4);
        assert_eq!(png_bit_depth(64).unwrap(), 8);
        assert!(png_bit_depth(257).is_err());
    }

    #[test]
    fn rejects_non_indexed_png() {
        let img = RgbImage::filled(2, 2, [0.1, 0.2, 0.3]).unwrap();
        let mut bytes = Vec::new();
        img.to_rgb8().write_to(&mut Cursor::new(&mut bytes), image::ImageFormat::Png).unwrap();
        assert!(matches!(decode_indexed_png(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn blob_hash_matches_git_sha256() {
        // `git hash-object --object-format=sha256` of an empty file.
        assert_eq!(blob_hash(b""), "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813");
    }

    fn model() -> CqFormer {
        CqFormer::new(CqFormerConfig { colours: 2, query_dim: 4, encoder: EncoderConfig::UNet { widths: [2, 2, 2] }, palette_mode: PaletteMode::Branch, seed: 3 }).unwrap()
    }

    #[test]
    fn checkpoint_round_trip() {
        let q = model();
        let cnn = SmallCnn::new(ClassifierConfig { num_classes: 3, widths: vec![2], seed: 1 }).unwrap();
        let mut ck = Checkpoint::new(CheckpointManifest {
            quantiser: q.config().clone(),
            tau: 0.01,
            classifier: Some(cnn.config().clone()),
            epoch: 2,
            extra: serde_json::json!({"note": "x"}),
        });
        ck.push_store(QUANTISER, q.params());
        ck.push_store(CLASSIFIER, cnn.params());
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.quantiser().unwrap().params(), q.params());
        assert_eq!(back.classifier().unwrap().unwrap().params(), cnn.params());

        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Corrupt { .. })));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..20]), Err(Error::Corrupt { .. })));
        assert!(matches!(Checkpoint::from_bytes(b"nope, not a checkpoint at all, really not one"), Err(Error::Corrupt { offset: 0, .. })));
    }

    #[test]
    fn missing_tensor_is_reported() {
        let q = model();
        let ck = Checkpoint::new(CheckpointManifest { quantiser: q.config().clone(), tau: 0.5, classifier: None, epoch: 0, extra: serde_json::Value::Null });
        assert!(matches!(ck.quantiser(), Err(Error::Format(_))));
        assert!(ck.classifier().unwrap().is_none());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn indexed_png_round_trip(
            h in 1usize..9, w in 1usize..13,
            n in 1usize..40,
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let colours: Vec<[f64; 3]> = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
            let palette = Palette::new(colours).unwrap();
            let index = IndexMap::new(h, w, n, (0..h * w).map(|_| rng.random_range(0..n)).collect()).unwrap();
            let bytes = encode_indexed_png(&index, &palette).unwrap();
            let back = decode_indexed_png(&bytes).unwrap();
            prop_assert_eq!(back.bit_depth, png_bit_depth(n).unwrap());
            prop_assert_eq!(back.palette.len(), n);
            prop_assert_eq!(&back.index.data, &index.data);
            prop_assert_eq!(back.to_rgb8(), palette.render(&index).to_rgb8());
        }
    }
}
