//! On-disk dataset format.
//!
//! A dataset directory holds `manifest.json` and `episodes.bin`. Each record
//! in `episodes.bin` starts with a 16-byte header (8-byte magic, u32 format
//! version, u32 length of the rest of the record), followed by a u32-length
//! prefixed JSON metadata blob and the little-endian f32 frames and actions.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{env, vocabulary, Episode, EpisodeMeta, GenerateConfig, NuisanceConfig};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: [u8; 8] = *b"JEPAEPIS";
pub const VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const EPISODES: &str = "episodes.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub n_records: usize,
    pub n_successful: usize,
    pub views: usize,
    pub frames_per_episode: usize,
    pub image_size: usize,
    pub action_dim: usize,
    pub has_actions: bool,
    pub paired: bool,
    pub action_min: Vec<f32>,
    pub action_max: Vec<f32>,
    pub nuisance: NuisanceConfig,
    pub vocabulary: Vec<String>,
    pub generator: GenerateConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub episodes: Vec<Episode>,
}

fn push_f32s(buf: &mut Vec<u8>, values: &[f32]) {
    buf.reserve(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn encode_record(ep: &Episode) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(&ep.meta)?;
    let mut body = Vec::new();
    body.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    body.extend_from_slice(&meta);
    push_f32s(&mut body, ep.frames.data());
    if let Some(a) = &ep.actions {
        push_f32s(&mut body, a.data());
    }
    let mut rec = Vec::with_capacity(16 + body.len());
    rec.extend_from_slice(&MAGIC);
    rec.extend_from_slice(&VERSION.to_le_bytes());
    rec.extend_from_slice(&(body.len() as u32).to_le_bytes());
    rec.extend_from_slice(&body);
    Ok(rec)
}

pub fn write_dataset(dir: &Path, cfg: &GenerateConfig, episodes: &[Episode]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bin = dir.join(EPISODES);
    let file = fs::File::create(&bin).map_err(|e| Error::io(&bin, e))?;
    let mut w = BufWriter::new(file);
    for ep in episodes {
        w.write_all(&encode_record(ep)?).map_err(|e| Error::io(&bin, e))?;
    }
    w.flush().map_err(|e| Error::io(&bin, e))?;

    let (action_min, action_max) = env::action_bounds(cfg.action_dim);
    let first = episodes.first().ok_or_else(|| Error::Invalid("no episodes to write".into()))?;
    let manifest = Manifest {
        version: VERSION,
        n_records: episodes.len(),
        n_successful: episodes.iter().filter(|e| e.meta.success).count(),
        views: first.views(),
        frames_per_episode: first.num_frames(),
        image_size: first.image_size(),
        action_dim: cfg.action_dim,
        has_actions: !cfg.action_free,
        paired: cfg.paired,
        action_min,
        action_max,
        nuisance: cfg.nuisance,
        vocabulary: vocabulary(),
        generator: cfg.clone(),
    };
    let path = dir.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

/// Bounds-checked little-endian reader over a byte buffer.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pub(crate) pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8], path: &'a Path) -> Self {
        Reader { buf, pos: 0, path }
    }

    pub(crate) fn at_end(&self) -> bool {
        self.pos >= self.buf.len()
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(self.path, format!("truncated record at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n * 4)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Parses the contents of an `episodes.bin` file.
pub fn decode_episodes(bytes: &[u8], path: &Path) -> Result<Vec<Episode>> {
    let mut r = Reader::new(bytes, path);
    let mut out = Vec::new();
    while !r.at_end() {
        let start = r.pos;
        if r.take(8)? != MAGIC {
            return Err(Error::format(path, format!("bad magic at byte {start}")));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported record version {version}")));
        }
        let len = r.u32()? as usize;
        let body_start = r.pos;
        let meta_len = r.u32()? as usize;
        let meta: EpisodeMeta = serde_json::from_slice(r.take(meta_len)?)?;
        let frames_n: usize = meta.frames_shape.iter().product();
        let frames = Tensor::new(meta.frames_shape.clone(), r.f32s(frames_n)?)?;
        let actions = match &meta.actions_shape {
            Some(s) => Some(Tensor::new(s.clone(), r.f32s(s.iter().product())?)?),
            None => None,
        };
        if r.pos - body_start != len {
            return Err(Error::format(path, format!("record at byte {start} has inconsistent length")));
        }
        out.push(Episode { meta, frames, actions });
    }
    Ok(out)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if manifest.version != VERSION {
        return Err(Error::format(&path, format!("unsupported dataset version {}", manifest.version)));
    }
    Ok(manifest)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let path = dir.join(EPISODES);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let episodes = decode_episodes(&bytes, &path)?;
    if episodes.len() != manifest.n_records {
        return Err(Error::format(
            &path,
            format!("manifest lists {} records, file has {}", manifest.n_records, episodes.len()),
        ));
    }
    Ok(Dataset { manifest, episodes })
}

#[cfg(test)]
mod tests {
    use super::super::generate::generate_episodes;
    use super::*;

    fn cfg() -> GenerateConfig {
        GenerateConfig {
            n_episodes: 2,
            image_size: 8,
            ticks: 5,
            ..Default::default()
        }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let eps = generate_episodes(&cfg()).unwrap();
        write_dataset(dir.path(), &cfg(), &eps).unwrap();
        let ds = read_dataset(dir.path()).unwrap();
        assert_eq!(ds.episodes, eps);
        assert_eq!(ds.manifest.n_records, 2);
        assert_eq!(ds.manifest.vocabulary.len(), super::super::VOCAB_SIZE);
    }

    #[test]
    fn generation_is_byte_identical() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let c = GenerateConfig { n_episodes: 1, ..cfg() };
        super::super::generate_dataset(&c, a.path()).unwrap();
        super::super::generate_dataset(&c, b.path()).unwrap();
        for f in [MANIFEST, EPISODES] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        }
    }

    #[test]
    fn unknown_magic_and_version_rejected() {
        let eps = generate_episodes(&cfg()).unwrap();
        let rec = encode_record(&eps[0]).unwrap();
        let p = Path::new("episodes.bin");
        let mut bad = rec.clone();
        bad[0] ^= 0xff;
        assert!(matches!(decode_episodes(&bad, p), Err(Error::Format { .. })));
        let mut bad = rec.clone();
        bad[8..12].copy_from_slice(&99u32.to_le_bytes());
        assert!(matches!(decode_episodes(&bad, p), Err(Error::Format { .. })));
        assert!(decode_episodes(&rec[..rec.len() - 1], p).is_err());
        assert_eq!(decode_episodes(&rec, p).unwrap().len(), 1);
    }
}
