//! Binary interaction datasets. Records store poses and pokes, not images;
//! renders are deterministic, so images are reproduced on demand and files
//! stay small. All fields are little-endian; records are fixed-size f32,
//! giving O(1) random access.
//!
//! Layout: magic "POKD", u16 version, arena parameters as 9 f32 values
//! (arena_size, rect_w, rect_h, k_t, k_r, wall_margin, noise_std, l_min,
//! l_max), u64 record count, u64 generation seed; then per record 11 f32
//! values (cx, cy, theta | px, py, poke_theta, length, nopoke flag |
//! cx', cy', theta').
//!
//! Readers keep their own cursor, so concurrent reads need one reader each;
//! generation is single-writer.

use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use poke_core::sim::{generate_interactions, ArenaParams, Interaction, Poke, Pose};

pub const MAGIC: [u8; 4] = *b"POKD";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: u64 = 4 + 2 + 9 * 4 + 8 + 8;
pub const RECORD_LEN: u64 = 11 * 4;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetHeader {
    pub params: ArenaParams,
    pub record_count: u64,
    pub seed: u64,
}

fn params_to_f32(p: &ArenaParams) -> [f32; 9] {
    [
        p.arena_size as f32,
        p.rect_w as f32,
        p.rect_h as f32,
        p.k_t as f32,
        p.k_r as f32,
        p.wall_margin as f32,
        p.noise_std as f32,
        p.poke_len_range.0 as f32,
        p.poke_len_range.1 as f32,
    ]
}

fn params_from_f32(v: &[f32; 9]) -> ArenaParams {
    ArenaParams {
        arena_size: v[0] as usize,
        rect_w: v[1] as f64,
        rect_h: v[2] as f64,
        k_t: v[3] as f64,
        k_r: v[4] as f64,
        wall_margin: v[5] as f64,
        noise_std: v[6] as f64,
        poke_len_range: (v[7] as f64, v[8] as f64),
    }
}

fn record_to_f32(r: &Interaction) -> [f32; 11] {
    [
        r.pose_t.cx as f32,
        r.pose_t.cy as f32,
        r.pose_t.theta as f32,
        r.poke.px as f32,
        r.poke.py as f32,
        r.poke.theta as f32,
        r.poke.length as f32,
        if r.poke.is_nopoke { 1.0 } else { 0.0 },
        r.pose_t1.cx as f32,
        r.pose_t1.cy as f32,
        r.pose_t1.theta as f32,
    ]
}

fn record_from_f32(v: &[f32; 11]) -> Interaction {
    let poke = if v[7] > 0.5 {
        Poke::nopoke()
    } else {
        Poke::new(v[3] as f64, v[4] as f64, v[5] as f64, v[6] as f64)
    };
    Interaction {
        pose_t: Pose::new(v[0] as f64, v[1] as f64, v[2] as f64),
        poke,
        pose_t1: Pose::new(v[8] as f64, v[9] as f64, v[10] as f64),
    }
}

/// Generates `n` records (pose chains of length 20, as during continuous
/// robot interaction) and writes them to `path`.
pub fn generate(n: u64, seed: u64, params: &ArenaParams, path: &Path) -> Result<DatasetHeader> {
    if n == 0 {
        bail!("dataset must contain at least one record");
    }
    let records = generate_interactions(n as usize, seed, params)
        .context("generating interactions")?;
    let header = DatasetHeader {
        params: *params,
        record_count: n,
        seed,
    };
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for v in params_to_f32(params) {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&n.to_le_bytes())?;
    w.write_all(&seed.to_le_bytes())?;
    for r in &records {
        for v in record_to_f32(r) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(header)
}

/// Random-access reader over one dataset file.
#[derive(Debug)]
pub struct DatasetReader {
    file: File,
    header: DatasetHeader,
}

impl DatasetReader {
    pub fn open(path: &Path) -> Result<Self> {
        let mut file =
            File::open(path).with_context(|| format!("opening {}", path.display()))?;
        let mut magic = [0u8; 4];
        file.read_exact(&mut magic).context("reading magic")?;
        if magic != MAGIC {
            bail!("bad magic {magic:?}: not a POKD dataset");
        }
        let mut buf2 = [0u8; 2];
        file.read_exact(&mut buf2)?;
        let version = u16::from_le_bytes(buf2);
        if version != VERSION {
            bail!("unsupported dataset version {version} (expected {VERSION})");
        }
        let mut pv = [0f32; 9];
        for v in pv.iter_mut() {
            let mut b = [0u8; 4];
            file.read_exact(&mut b)?;
            *v = f32::from_le_bytes(b);
        }
        let mut b8 = [0u8; 8];
        file.read_exact(&mut b8)?;
        let record_count = u64::from_le_bytes(b8);
        file.read_exact(&mut b8)?;
        let seed = u64::from_le_bytes(b8);
        let params = params_from_f32(&pv);
        params
            .validate()
            .map_err(|e| anyhow::anyhow!("{e}"))
            .context("dataset header parameters")?;
        let expected = HEADER_LEN + record_count * RECORD_LEN;
        let actual = file.metadata()?.len();
        if actual != expected {
            bail!("file length {actual} does not match header ({expected} for {record_count} records)");
        }
        Ok(DatasetReader {
            file,
            header: DatasetHeader {
                params,
                record_count,
                seed,
            },
        })
    }

    pub fn header(&self) -> &DatasetHeader {
        &self.header
    }

    pub fn read_record(&mut self, index: u64) -> Result<Interaction> {
        if index >= self.header.record_count {
            bail!(
                "record index {index} out of range (dataset holds {})",
                self.header.record_count
            );
        }
        self.file
            .seek(SeekFrom::Start(HEADER_LEN + index * RECORD_LEN))?;
        let mut buf = [0u8; RECORD_LEN as usize];
        self.file.read_exact(&mut buf)?;
        let mut v = [0f32; 11];
        for (i, v) in v.iter_mut().enumerate() {
            *v = f32::from_le_bytes(buf[i * 4..i * 4 + 4].try_into().unwrap());
        }
        Ok(record_from_f32(&v))
    }

    /// All records in file order.
    pub fn read_all(&mut self) -> Result<Vec<Interaction>> {
        self.file.seek(SeekFrom::Start(HEADER_LEN))?;
        let count = self.header.record_count as usize;
        let mut bytes = vec![0u8; count * RECORD_LEN as usize];
        self.file.read_exact(&mut bytes)?;
        let mut out = Vec::with_capacity(count);
        for rec in bytes.chunks_exact(RECORD_LEN as usize) {
            let mut v = [0f32; 11];
            for (i, v) in v.iter_mut().enumerate() {
                *v = f32::from_le_bytes(rec[i * 4..i * 4 + 4].try_into().unwrap());
            }
            out.push(record_from_f32(&v));
        }
        Ok(out)
    }
}

/// True when two parameter sets agree at the f32 precision of the file
/// header; a dataset and a config that pass this were generated under the
/// same physics.
pub fn params_compatible(a: &ArenaParams, b: &ArenaParams) -> bool {
    params_to_f32(a) == params_to_f32(b)
}

/// Convenience: open and load a whole dataset.
pub fn load(path: &Path) -> Result<(DatasetHeader, Vec<Interaction>)> {
    let mut reader = DatasetReader::open(path)?;
    let records = reader.read_all()?;
    Ok((reader.header, records))
}
