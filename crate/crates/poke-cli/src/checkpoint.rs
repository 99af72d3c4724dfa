//! Model checkpoints. Parameters are stored as f64 so save/load is exact;
//! the effective config text that produced the model is embedded verbatim.
//!
//! Layout (little-endian): magic "POKM", u16 version, u32 image_size,
//! f64 lambda, arena parameters as 9 f64 values (same order as the dataset
//! header), u32 config text length + UTF-8 bytes, u64 parameter count, then
//! the flat parameter vector as f64.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use poke_core::model::ModelParams;
use poke_core::sim::ArenaParams;

pub const MAGIC: [u8; 4] = *b"POKM";
pub const VERSION: u16 = 1;

#[derive(Debug)]
pub struct Checkpoint {
    pub params: ModelParams,
    /// Forward-loss weight the model was trained with (0 = inverse-only).
    pub lambda: f64,
    pub arena: ArenaParams,
    /// Effective config at training time, as rendered key = value text.
    pub config_text: String,
}

fn arena_to_f64(p: &ArenaParams) -> [f64; 9] {
    [
        p.arena_size as f64,
        p.rect_w,
        p.rect_h,
        p.k_t,
        p.k_r,
        p.wall_margin,
        p.noise_std,
        p.poke_len_range.0,
        p.poke_len_range.1,
    ]
}

fn arena_from_f64(v: &[f64; 9]) -> ArenaParams {
    ArenaParams {
        arena_size: v[0] as usize,
        rect_w: v[1],
        rect_h: v[2],
        k_t: v[3],
        k_r: v[4],
        wall_margin: v[5],
        noise_std: v[6],
        poke_len_range: (v[7], v[8]),
    }
}

pub fn save(
    path: &Path,
    params: &ModelParams,
    lambda: f64,
    arena: &ArenaParams,
    config_text: &str,
) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(params.image_size() as u32).to_le_bytes())?;
    w.write_all(&lambda.to_le_bytes())?;
    for v in arena_to_f64(arena) {
        w.write_all(&v.to_le_bytes())?;
    }
    let text = config_text.as_bytes();
    w.write_all(&(text.len() as u32).to_le_bytes())?;
    w.write_all(text)?;
    let n = params.param_count();
    w.write_all(&(n as u64).to_le_bytes())?;
    for i in 0..n {
        w.write_all(&params.coord(i).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).context("reading magic")?;
    if magic != MAGIC {
        bail!("bad magic {magic:?}: not a POKM checkpoint");
    }
    let mut b2 = [0u8; 2];
    r.read_exact(&mut b2)?;
    let version = u16::from_le_bytes(b2);
    if version != VERSION {
        bail!("unsupported checkpoint version {version} (expected {VERSION})");
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let image_size = u32::from_le_bytes(b4) as usize;
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let lambda = f64::from_le_bytes(b8);
    let mut av = [0f64; 9];
    for v in av.iter_mut() {
        r.read_exact(&mut b8)?;
        *v = f64::from_le_bytes(b8);
    }
    let arena = arena_from_f64(&av);
    r.read_exact(&mut b4)?;
    let text_len = u32::from_le_bytes(b4) as usize;
    let mut text = vec![0u8; text_len];
    r.read_exact(&mut text)?;
    let config_text = String::from_utf8(text).context("config text is not UTF-8")?;
    r.read_exact(&mut b8)?;
    let count = u64::from_le_bytes(b8) as usize;
    let mut params =
        ModelParams::init(image_size, 0).map_err(|e| anyhow::anyhow!("{e}"))?;
    if params.param_count() != count {
        bail!(
            "checkpoint holds {count} parameters but a {image_size} px model has {}",
            params.param_count()
        );
    }
    for i in 0..count {
        r.read_exact(&mut b8)?;
        params.set_coord(i, f64::from_le_bytes(b8));
    }
    // Anything left over means the file was not written by this layout.
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        bail!("trailing bytes after parameter vector");
    }
    Ok(Checkpoint {
        params,
        lambda,
        arena,
        config_text,
    })
}
