//! Binary channel shards and the JSON manifest that indexes them.
//!
//! Shard layout, all little-endian:
//!
//! ```text
//! "FASD" | version u32 | n_s u32 | m_t u32 | n_y u32 | n_x u32 | count u32
//!        | master seed u64 | wavelength f64 | w_x f64 | w_y f64 | delta f64
//! count × ( seed u64 | n_s·m_t × (re f32, im f32) )   port-major, row-major ports
//! ```

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use chrono::Utc;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::{sample_channel, ChannelSample, CorrelationModel};
use crate::config::GridConfig;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from, stream};

pub const MAGIC: &[u8; 4] = b"FASD";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 68;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PORT_ORDER: &str = "row-major over (n_y, n_x): port = y * n_x + x";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShardHeader {
    pub version: u32,
    pub n_s: u32,
    pub m_t: u32,
    pub n_y: u32,
    pub n_x: u32,
    pub count: u32,
    pub master_seed: u64,
    pub wavelength: f64,
    pub w_x: f64,
    pub w_y: f64,
    pub delta: f64,
}

impl ShardHeader {
    pub fn sample_bytes(&self) -> usize {
        8 + self.n_s as usize * self.m_t as usize * 8
    }

    fn encode(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[0..4].copy_from_slice(MAGIC);
        let words = [self.version, self.n_s, self.m_t, self.n_y, self.n_x, self.count];
        for (i, w) in words.iter().enumerate() {
            b[4 + 4 * i..8 + 4 * i].copy_from_slice(&w.to_le_bytes());
        }
        b[28..36].copy_from_slice(&self.master_seed.to_le_bytes());
        for (i, v) in [self.wavelength, self.w_x, self.w_y, self.delta].iter().enumerate() {
            b[36 + 8 * i..44 + 8 * i].copy_from_slice(&v.to_le_bytes());
        }
        b
    }

    fn decode(b: &[u8]) -> Result<Self> {
        if b.len() < HEADER_LEN || &b[0..4] != MAGIC {
            return Err(Error::Data("not a channel shard (bad magic)".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().unwrap());
        let f64_at = |o: usize| f64::from_le_bytes(b[o..o + 8].try_into().unwrap());
        let h = Self {
            version: u32_at(4),
            n_s: u32_at(8),
            m_t: u32_at(12),
            n_y: u32_at(16),
            n_x: u32_at(20),
            count: u32_at(24),
            master_seed: u64::from_le_bytes(b[28..36].try_into().unwrap()),
            wavelength: f64_at(36),
            w_x: f64_at(44),
            w_y: f64_at(52),
            delta: f64_at(60),
        };
        if h.version != FORMAT_VERSION {
            return Err(Error::Data(format!("unsupported shard version {}", h.version)));
        }
        if h.n_s != h.n_y * h.n_x {
            return Err(Error::Data(format!("header grid {}x{} does not give {} ports", h.n_y, h.n_x, h.n_s)));
        }
        Ok(h)
    }
}

/// One stored channel, `n_s × m_t` gains in port-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredSample {
    pub seed: u64,
    pub g: Vec<Complex64>,
}

impl StoredSample {
    pub fn to_channel(&self, n_ports: usize, m_t: usize, delta: f64) -> Result<ChannelSample> {
        ChannelSample::from_clean(self.g.clone(), n_ports, m_t, delta, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    pub header: ShardHeader,
    pub samples: Vec<StoredSample>,
}

/// Encode a shard; values are rounded to f32.
pub fn encode_shard(header: &ShardHeader, samples: &[StoredSample]) -> Result<Vec<u8>> {
    let per = header.n_s as usize * header.m_t as usize;
    if samples.len() != header.count as usize {
        return Err(Error::Data(format!("header count {} but {} samples", header.count, samples.len())));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + samples.len() * header.sample_bytes());
    out.extend_from_slice(&header.encode());
    for s in samples {
        if s.g.len() != per {
            return Err(Error::Data(format!("sample has {} gains, expected {per}", s.g.len())));
        }
        out.extend_from_slice(&s.seed.to_le_bytes());
        for v in &s.g {
            out.extend_from_slice(&(v.re as f32).to_le_bytes());
            out.extend_from_slice(&(v.im as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_shard(bytes: &[u8]) -> Result<Shard> {
    let header = ShardHeader::decode(bytes)?;
    let expected = HEADER_LEN + header.count as usize * header.sample_bytes();
    if bytes.len() != expected {
        return Err(Error::Data(format!(
            "shard is {} bytes, header implies {expected}",
            bytes.len()
        )));
    }
    let per = header.n_s as usize * header.m_t as usize;
    let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as f64;
    let samples = (0..header.count as usize)
        .map(|i| {
            let base = HEADER_LEN + i * header.sample_bytes();
            let seed = u64::from_le_bytes(bytes[base..base + 8].try_into().unwrap());
            let g = (0..per)
                .map(|k| {
                    let o = base + 8 + 8 * k;
                    Complex64::new(f32_at(o), f32_at(o + 4))
                })
                .collect();
            StoredSample { seed, g }
        })
        .collect();
    Ok(Shard { header, samples })
}

pub fn write_shard(path: &Path, header: &ShardHeader, samples: &[StoredSample]) -> Result<()> {
    let bytes = encode_shard(header, samples)?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_shard(path: &Path) -> Result<Shard> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_shard(&bytes).map_err(|e| match e {
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitEntry {
    pub name: String,
    pub file: String,
    pub count: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub grid: GridConfig,
    pub wavelength: f64,
    pub port_order: String,
    pub master_seed: u64,
    pub splits: Vec<SplitEntry>,
    pub config_hash: String,
    pub created: String,
    /// Hash of every field except `created` and this one.
    pub manifest_hash: String,
}

impl Manifest {
    pub fn content_hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("manifest serializes");
        let obj = v.as_object_mut().expect("manifest is an object");
        obj.remove("created");
        obj.remove("manifest_hash");
        hex::encode(Sha256::digest(serde_json::to_vec(&v).expect("manifest serializes")))
    }

    pub fn split(&self, name: &str) -> Option<&SplitEntry> {
        self.splits.iter().find(|s| s.name == name)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if m.content_hash() != m.manifest_hash {
            return Err(Error::Data(format!("{}: manifest hash mismatch", path.display())));
        }
        Ok(m)
    }
}

/// Split sizes for [`generate_dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    fn named(&self) -> [(&'static str, usize); 3] {
        [("train", self.train), ("val", self.val), ("test", self.test)]
    }
}

/// Draw `count` channels for split number `split_tag`.
pub fn synthesize_split(corr: &CorrelationModel, grid: &GridConfig, master_seed: u64, split_tag: u64, count: usize) -> Result<Vec<StoredSample>> {
    (0..count)
        .map(|i| {
            let seed = derive_seed(master_seed, &[stream::CHANNEL, split_tag, i as u64]);
            let mut rng = rng_from(seed, &[]);
            let s = sample_channel(corr, grid.m_t, grid.delta, seed, &mut rng)?;
            Ok(StoredSample { seed, g: s.g_clean })
        })
        .collect()
}

/// Write one shard per split plus the manifest into `dir`.
pub fn generate_dataset(dir: &Path, grid: &GridConfig, sizes: SplitSizes, master_seed: u64, config_hash: &str, force: bool) -> Result<Manifest> {
    for (name, n) in sizes.named() {
        if n == 0 {
            return Err(Error::InvalidArgument(format!("empty split: {name}")));
        }
    }
    let manifest_path = dir.join(MANIFEST_FILE);
    if manifest_path.exists() && !force {
        return Err(Error::InvalidArgument(format!(
            "{} already exists (use --force to overwrite)",
            manifest_path.display()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let port_grid = grid.port_grid()?;
    let corr = CorrelationModel::for_grid(&port_grid)?;

    let mut splits = Vec::new();
    for (tag, (name, count)) in sizes.named().into_iter().enumerate() {
        let samples = synthesize_split(&corr, grid, master_seed, tag as u64, count)?;
        let header = ShardHeader {
            version: FORMAT_VERSION,
            n_s: grid.n_ports() as u32,
            m_t: grid.m_t as u32,
            n_y: grid.n_y as u32,
            n_x: grid.n_x as u32,
            count: count as u32,
            master_seed,
            wavelength: port_grid.wavelength,
            w_x: port_grid.w_x,
            w_y: port_grid.w_y,
            delta: grid.delta,
        };
        let bytes = encode_shard(&header, &samples)?;
        let file = format!("{name}.fasd");
        let path = dir.join(&file);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        splits.push(SplitEntry {
            name: name.to_string(),
            file,
            count,
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
    }

    let mut manifest = Manifest {
        format_version: FORMAT_VERSION,
        grid: grid.clone(),
        wavelength: port_grid.wavelength,
        port_order: PORT_ORDER.to_string(),
        master_seed,
        splits,
        config_hash: config_hash.to_string(),
        created: Utc::now().to_rfc3339(),
        manifest_hash: String::new(),
    };
    manifest.manifest_hash = manifest.content_hash();
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest)
}

/// All splits of a dataset in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub grid: GridConfig,
    pub master_seed: u64,
    pub train: Vec<StoredSample>,
    pub val: Vec<StoredSample>,
    pub test: Vec<StoredSample>,
}

impl Dataset {
    /// Draw a dataset without touching disk (values rounded to f32 as in a shard).
    pub fn synthesize(grid: &GridConfig, sizes: SplitSizes, master_seed: u64) -> Result<Self> {
        let corr = CorrelationModel::for_grid(&grid.port_grid()?)?;
        let mut splits = sizes.named().into_iter().enumerate().map(|(tag, (_, n))| {
            synthesize_split(&corr, grid, master_seed, tag as u64, n).map(|v| {
                v.into_iter()
                    .map(|s| StoredSample {
                        seed: s.seed,
                        g: s.g.iter().map(|c| Complex64::new(c.re as f32 as f64, c.im as f32 as f64)).collect(),
                    })
                    .collect::<Vec<_>>()
            })
        });
        Ok(Self {
            grid: grid.clone(),
            master_seed,
            train: splits.next().unwrap()?,
            val: splits.next().unwrap()?,
            test: splits.next().unwrap()?,
        })
    }

    /// Load every split listed in `dir`'s manifest, checking headers against it.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = Manifest::load(dir)?;
        let get = |name: &str| -> Result<Vec<StoredSample>> {
            let entry = manifest
                .split(name)
                .ok_or_else(|| Error::Data(format!("manifest lists no {name} split")))?;
            let path: PathBuf = dir.join(&entry.file);
            let shard = read_shard(&path)?;
            let h = &shard.header;
            let g = &manifest.grid;
            if (h.n_y as usize, h.n_x as usize, h.m_t as usize) != (g.n_y, g.n_x, g.m_t) || h.count as usize != entry.count {
                return Err(Error::Data(format!("{} does not match the manifest grid", path.display())));
            }
            Ok(shard.samples)
        };
        let (train, val, test) = (get("train")?, get("val")?, get("test")?);
        Ok(Self {
            grid: manifest.grid.clone(),
            master_seed: manifest.master_seed,
            train,
            val,
            test,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_grid() -> GridConfig {
        GridConfig {
            n_y: 4,
            n_x: 2,
            m_t: 2,
            ..GridConfig::default()
        }
    }

    #[test]
    fn header_is_68_bytes_and_round_trips() {
        let h = ShardHeader {
            version: FORMAT_VERSION,
            n_s: 512,
            m_t: 8,
            n_y: 32,
            n_x: 16,
            count: 3,
            master_seed: 0xDEAD_BEEF_0123,
            wavelength: 0.088,
            w_x: 0.02,
            w_y: 0.04,
            delta: 1.0,
        };
        let b = h.encode();
        assert_eq!(b.len(), HEADER_LEN);
        assert_eq!(ShardHeader::decode(&b).unwrap(), h);
        assert_eq!(h.sample_bytes(), 8 + 512 * 8 * 2 * 4);
    }

    #[test]
    fn shard_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let grid = small_grid();
        let m = generate_dataset(dir.path(), &grid, SplitSizes { train: 8, val: 2, test: 2 }, 11, "h", false).unwrap();
        assert_eq!(m.splits.iter().map(|s| s.count).sum::<usize>(), 12);
        assert_eq!(m.splits.len(), 3);
        let shard = read_shard(&dir.path().join("train.fasd")).unwrap();
        let bytes = fs::read(dir.path().join("train.fasd")).unwrap();
        assert_eq!(encode_shard(&shard.header, &shard.samples).unwrap(), bytes);
        assert_eq!(bytes.len(), HEADER_LEN + 8 * (8 + 8 * 2 * 8));

        let mem = Dataset::synthesize(&grid, SplitSizes { train: 8, val: 2, test: 2 }, 11).unwrap();
        let disk = Dataset::load(dir.path()).unwrap();
        assert_eq!(mem.train, disk.train);
        assert_eq!(mem.test, disk.test);
    }

    #[test]
    fn generation_is_deterministic() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let sizes = SplitSizes { train: 3, val: 1, test: 1 };
        let ma = generate_dataset(a.path(), &small_grid(), sizes, 5, "h", false).unwrap();
        let mb = generate_dataset(b.path(), &small_grid(), sizes, 5, "h", false).unwrap();
        assert_eq!(ma.manifest_hash, mb.manifest_hash);
        for f in ["train.fasd", "val.fasd", "test.fasd"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        }
        let mc = generate_dataset(a.path(), &small_grid(), sizes, 6, "h", true).unwrap();
        assert_ne!(ma.manifest_hash, mc.manifest_hash);
    }

    #[test]
    fn rejects_empty_split_existing_output_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let r = generate_dataset(dir.path(), &small_grid(), SplitSizes { train: 0, val: 1, test: 1 }, 1, "h", false);
        assert!(matches!(r, Err(Error::InvalidArgument(m)) if m.contains("empty split")));
        let sizes = SplitSizes { train: 1, val: 1, test: 1 };
        generate_dataset(dir.path(), &small_grid(), sizes, 1, "h", false).unwrap();
        assert!(generate_dataset(dir.path(), &small_grid(), sizes, 1, "h", false).is_err());

        let path = dir.path().join("val.fasd");
        let mut bytes = fs::read(&path).unwrap();
        bytes.pop();
        assert!(matches!(decode_shard(&bytes), Err(Error::Data(_))));
        bytes[0] = b'X';
        assert!(matches!(decode_shard(&bytes), Err(Error::Data(_))));
    }

    #[test]
    fn default_grid_wavelength_in_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let grid = GridConfig { m_t: 1, ..GridConfig::default() };
        let m = generate_dataset(dir.path(), &grid, SplitSizes { train: 1, val: 1, test: 1 }, 1, "h", false).unwrap();
        assert!((m.wavelength - 0.088_174).abs() < 1e-6);
        assert_eq!(Manifest::load(dir.path()).unwrap(), m);
    }
}
