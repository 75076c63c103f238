//! On-disk formats: checkpoints, PLY export, PNG images and masks, SfM points.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::types::{
    sh_coeff_count, BinaryMask, GaussianSet, ImageBuffer, SfmPoints, MAX_SH_DEGREE,
};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PDFG";
pub const CHECKPOINT_VERSION: u32 = 1;
/// Magic, version, phase, step, config hash (u64), count, SH degree.
pub const CHECKPOINT_HEADER_BYTES: usize = 4 + 4 + 4 + 4 + 8 + 4 + 4;
pub const SFM_MAGIC: &[u8; 4] = b"SFMP";
pub const SFM_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub phase: u32,
    pub step: u32,
    pub config_hash: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub meta: CheckpointMeta,
    pub set: GaussianSet,
}

/// Floats stored per Gaussian: position, log-scale, rotation, opacity logit and SH.
pub fn checkpoint_floats_per_gaussian(sh_degree: usize) -> usize {
    3 + 3 + 4 + 1 + 3 * sh_coeff_count(sh_degree)
}

fn put_f32s<'a>(
    w: &mut impl Write,
    vals: impl IntoIterator<Item = &'a f32>,
) -> std::io::Result<()> {
    for v in vals {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner.read_exact(&mut b).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Format("truncated file".into()),
            _ => Error::Io(e),
        })?;
        Ok(b)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.bytes()?))
    }

    fn vec3s(&mut self, n: usize) -> Result<Vec<[f32; 3]>> {
        (0..n)
            .map(|_| Ok([self.f32()?, self.f32()?, self.f32()?]))
            .collect()
    }
}

pub fn save_checkpoint(set: &GaussianSet, meta: CheckpointMeta, path: &Path) -> Result<()> {
    set.validate()?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    for v in [CHECKPOINT_VERSION, meta.phase, meta.step] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&meta.config_hash.to_le_bytes())?;
    w.write_all(&(set.len() as u32).to_le_bytes())?;
    w.write_all(&(set.sh_degree as u32).to_le_bytes())?;
    put_f32s(&mut w, set.positions.iter().flatten())?;
    put_f32s(&mut w, set.log_scales.iter().flatten())?;
    put_f32s(&mut w, set.rotations.iter().flatten())?;
    put_f32s(&mut w, &set.opacity_logits)?;
    put_f32s(&mut w, set.sh.iter().flatten())?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = Reader {
        inner: BufReader::new(File::open(path)?),
    };
    if &r.bytes::<4>()? != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!(
            "{} is not a checkpoint",
            path.display()
        )));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let phase = r.u32()?;
    let step = r.u32()?;
    let config_hash = r.u64()?;
    let n = r.u32()? as usize;
    let sh_degree = r.u32()? as usize;
    if sh_degree > MAX_SH_DEGREE {
        return Err(Error::Format(format!("SH degree {sh_degree} out of range")));
    }
    let positions = r.vec3s(n)?;
    let log_scales = r.vec3s(n)?;
    let rotations = (0..n)
        .map(|_| Ok([r.f32()?, r.f32()?, r.f32()?, r.f32()?]))
        .collect::<Result<Vec<_>>>()?;
    let opacity_logits = (0..n).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
    let sh = r.vec3s(n * sh_coeff_count(sh_degree))?;
    let mut rest = [0u8; 1];
    if r.inner.read(&mut rest)? != 0 {
        return Err(Error::Format(
            "trailing bytes after checkpoint payload".into(),
        ));
    }
    Ok(Checkpoint {
        version,
        meta: CheckpointMeta {
            phase,
            step,
            config_hash,
        },
        set: GaussianSet {
            positions,
            log_scales,
            rotations,
            opacity_logits,
            sh,
            sh_degree,
        },
    })
}

/// Writes a binary little-endian PLY in the layout common splat viewers read.
/// Higher-order SH coefficients are stored channel-major (`f_rest` all red, then green, then blue).
pub fn export_ply(set: &GaussianSet, path: &Path) -> Result<()> {
    let ncoef = sh_coeff_count(set.sh_degree);
    let mut w = BufWriter::new(File::create(path)?);
    let mut header = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n",
        set.len()
    );
    let mut names: Vec<String> = ["x", "y", "z", "opacity", "scale_0", "scale_1", "scale_2"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    names.extend((0..4).map(|i| format!("rot_{i}")));
    names.extend((0..3).map(|i| format!("f_dc_{i}")));
    names.extend((0..3 * (ncoef - 1)).map(|i| format!("f_rest_{i}")));
    for n in &names {
        header.push_str(&format!("property float {n}\n"));
    }
    header.push_str("end_header\n");
    w.write_all(header.as_bytes())?;
    for i in 0..set.len() {
        let sh = set.sh_of(i);
        let mut row = Vec::with_capacity(names.len());
        row.extend(set.positions[i]);
        row.push(set.opacity_logits[i]);
        row.extend(set.log_scales[i]);
        row.extend(set.rotations[i]);
        row.extend(sh[0]);
        for ch in 0..3 {
            row.extend(sh[1..].iter().map(|c| c[ch]));
        }
        put_f32s(&mut w, &row)?;
    }
    w.flush()?;
    Ok(())
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Rounds every channel to the nearest 8-bit level, matching a PNG round trip.
pub fn quantize(img: &mut ImageBuffer) {
    for v in img.rgb.iter_mut() {
        *v = to_u8(*v) as f32 / 255.0;
    }
}

pub fn write_png(img: &ImageBuffer, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = img.rgb.iter().map(|&v| to_u8(v)).collect();
    image::save_buffer(
        path,
        &bytes,
        img.width as u32,
        img.height as u32,
        image::ExtendedColorType::Rgb8,
    )?;
    Ok(())
}

pub fn read_png(path: &Path) -> Result<ImageBuffer> {
    let img = image::open(path)?.to_rgb8();
    Ok(ImageBuffer {
        width: img.width() as usize,
        height: img.height() as usize,
        rgb: img.as_raw().iter().map(|&b| b as f32 / 255.0).collect(),
    })
}

/// Masks are stored as 8-bit grayscale with `true` as 255.
pub fn write_mask_png(m: &BinaryMask, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = m.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
    image::save_buffer(
        path,
        &bytes,
        m.width as u32,
        m.height as u32,
        image::ExtendedColorType::L8,
    )?;
    Ok(())
}

pub fn read_mask_png(path: &Path) -> Result<BinaryMask> {
    let img = image::open(path)?.to_luma8();
    Ok(BinaryMask {
        width: img.width() as usize,
        height: img.height() as usize,
        bits: img.as_raw().iter().map(|&b| b >= 128).collect(),
    })
}

/// Layout: magic `SFMP`, version u32, count u32, then positions and colors as
/// little-endian f32 triples.
pub fn save_sfm(pts: &SfmPoints, path: &Path) -> Result<()> {
    pts.validate()?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(SFM_MAGIC)?;
    w.write_all(&SFM_VERSION.to_le_bytes())?;
    w.write_all(&(pts.len() as u32).to_le_bytes())?;
    put_f32s(&mut w, pts.positions.iter().flatten())?;
    put_f32s(&mut w, pts.colors.iter().flatten())?;
    w.flush()?;
    Ok(())
}

pub fn load_sfm(path: &Path) -> Result<SfmPoints> {
    let mut r = Reader {
        inner: BufReader::new(File::open(path)?),
    };
    if &r.bytes::<4>()? != SFM_MAGIC {
        return Err(Error::Format(format!(
            "{} is not an SfM point file",
            path.display()
        )));
    }
    let version = r.u32()?;
    if version != SFM_VERSION {
        return Err(Error::Format(format!(
            "unsupported SfM file version {version}"
        )));
    }
    let n = r.u32()? as usize;
    let pts = SfmPoints {
        positions: r.vec3s(n)?,
        colors: r.vec3s(n)?,
    };
    pts.validate()?;
    Ok(pts)
}
