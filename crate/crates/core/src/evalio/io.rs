//! Frame and mask files.
//!
//! A sequence directory holds `frames/NNNNN.{ppm,png}` and `masks/NNNNN.{pgm,png}`,
//! numbered from 00000. Mask pixel values are object ids, 0 being background.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageFormat};

use crate::augment::TrainingSequence;
use crate::error::{Error, Result};
use crate::grid::{LabelMask, RgbImage};

const FRAME_EXTS: [&str; 2] = ["ppm", "png"];
const MASK_EXTS: [&str; 2] = ["pgm", "png"];

fn extension(path: &Path) -> Option<String> {
    path.extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
}

/// Files in `dir` with one of `exts`, in lexicographic order.
fn list_files(dir: &Path, exts: &[&str]) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && extension(&path).is_some_and(|e| exts.contains(&e.as_str())) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn decode(path: &Path, format: ImageFormat) -> Result<DynamicImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    image::load_from_memory_with_format(&bytes, format).map_err(|e| Error::format(path, e.to_string()))
}

pub fn read_frame(path: &Path) -> Result<RgbImage> {
    let format = match extension(path).as_deref() {
        Some("ppm") => ImageFormat::Pnm,
        Some("png") => ImageFormat::Png,
        _ => return Err(Error::format(path, "unknown frame format (expected .ppm or .png)")),
    };
    let img = decode(path, format)?.into_rgb8();
    let (w, h) = img.dimensions();
    RgbImage::new(h as usize, w as usize, img.into_raw())
}

/// Reads a label mask. PNG masks keep raw palette indices or 8-bit gray values.
pub fn read_mask(path: &Path) -> Result<LabelMask> {
    match extension(path).as_deref() {
        Some("pgm") => {
            let img = decode(path, ImageFormat::Pnm)?;
            if !matches!(img, DynamicImage::ImageLuma8(_)) {
                return Err(Error::format(path, "mask must be an 8-bit grayscale PGM"));
            }
            let img = img.into_luma8();
            let (w, h) = img.dimensions();
            LabelMask::new(h as usize, w as usize, img.into_raw())
        }
        Some("png") => read_png_indices(path),
        _ => Err(Error::format(path, "unknown mask format (expected .pgm or .png)")),
    }
}

fn read_png_indices(path: &Path) -> Result<LabelMask> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let bad = |e: png::DecodingError| Error::format(path, e.to_string());
    let mut reader = png::Decoder::new(std::io::BufReader::new(file)).read_info().map_err(bad)?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(bad)?;
    if !matches!(info.color_type, png::ColorType::Indexed | png::ColorType::Grayscale) {
        return Err(Error::format(path, "mask PNG must be indexed or grayscale"));
    }
    let (h, w) = (info.height as usize, info.width as usize);
    let bits = match info.bit_depth {
        png::BitDepth::One => 1,
        png::BitDepth::Two => 2,
        png::BitDepth::Four => 4,
        png::BitDepth::Eight => 8,
        png::BitDepth::Sixteen => return Err(Error::format(path, "16-bit mask PNGs are not supported")),
    };
    let mut labels = Vec::with_capacity(h * w);
    for row in buf[..info.buffer_size()].chunks(info.line_size) {
        for x in 0..w {
            let bit = x * bits;
            let byte = row[bit / 8];
            let shift = 8 - bits - bit % 8;
            labels.push((byte >> shift) & ((1u16 << bits) - 1) as u8);
        }
    }
    LabelMask::new(h, w, labels)
}

pub fn write_frame(path: &Path, frame: &RgbImage) -> Result<()> {
    let format = match extension(path).as_deref() {
        Some("png") => ImageFormat::Png,
        _ => ImageFormat::Pnm,
    };
    let img = image::RgbImage::from_raw(frame.width() as u32, frame.height() as u32, frame.data().to_vec())
        .expect("RgbImage holds h*w*3 bytes");
    save_image(path, DynamicImage::ImageRgb8(img), format)
}

pub fn write_mask(path: &Path, mask: &LabelMask) -> Result<()> {
    let format = match extension(path).as_deref() {
        Some("png") => ImageFormat::Png,
        _ => ImageFormat::Pnm,
    };
    let img = image::GrayImage::from_raw(mask.width() as u32, mask.height() as u32, mask.labels().to_vec())
        .expect("LabelMask holds h*w bytes");
    save_image(path, DynamicImage::ImageLuma8(img), format)
}

fn save_image(path: &Path, img: DynamicImage, format: ImageFormat) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    img.write_to(&mut out, format)
        .map_err(|e| Error::format(path, e.to_string()))
}

pub fn load_frames(dir: &Path) -> Result<Vec<RgbImage>> {
    list_files(dir, &FRAME_EXTS)?.iter().map(|p| read_frame(p)).collect()
}

pub fn load_masks(dir: &Path) -> Result<Vec<LabelMask>> {
    list_files(dir, &MASK_EXTS)?.iter().map(|p| read_mask(p)).collect()
}

/// Loads `dir/frames` and `dir/masks`, pairing files in order.
pub fn load_sequence(dir: &Path) -> Result<TrainingSequence> {
    let frame_files = list_files(&dir.join("frames"), &FRAME_EXTS)?;
    let mask_files = list_files(&dir.join("masks"), &MASK_EXTS)?;
    if frame_files.is_empty() {
        return Err(Error::format(dir.join("frames"), "no frame files"));
    }
    if frame_files.len() != mask_files.len() {
        let n = frame_files.len().min(mask_files.len());
        let extra = frame_files.get(n).or_else(|| mask_files.get(n)).expect("lengths differ");
        return Err(Error::format(
            extra,
            format!(
                "{} frames but {} masks; this file has no counterpart",
                frame_files.len(),
                mask_files.len()
            ),
        ));
    }
    let mut frames = Vec::with_capacity(frame_files.len());
    let mut masks = Vec::with_capacity(frame_files.len());
    for (fp, mp) in frame_files.iter().zip(&mask_files) {
        let f = read_frame(fp)?;
        let m = read_mask(mp)?;
        if f.height() != m.height() || f.width() != m.width() {
            return Err(Error::format(
                mp,
                format!(
                    "mask is {}x{} but frame {} is {}x{}",
                    m.height(),
                    m.width(),
                    fp.display(),
                    f.height(),
                    f.width()
                ),
            ));
        }
        if let Some(first) = frames.first() {
            let first: &RgbImage = first;
            if f.height() != first.height() || f.width() != first.width() {
                return Err(Error::format(fp, "frame size differs from the first frame"));
            }
        }
        frames.push(f);
        masks.push(m);
    }
    TrainingSequence::from_frames(frames, masks)
}

pub fn frame_name(index: usize, ext: &str) -> String {
    format!("{index:05}.{ext}")
}

/// Writes masks as `NNNNN.pgm`, creating `dir` if needed.
pub fn save_masks(dir: &Path, masks: &[LabelMask]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, m) in masks.iter().enumerate() {
        write_mask(&dir.join(frame_name(i, "pgm")), m)?;
    }
    Ok(())
}

pub fn save_frames(dir: &Path, frames: &[RgbImage]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in frames.iter().enumerate() {
        write_frame(&dir.join(frame_name(i, "ppm")), f)?;
    }
    Ok(())
}

pub fn save_sequence(dir: &Path, seq: &TrainingSequence) -> Result<()> {
    save_frames(&dir.join("frames"), &seq.frames)?;
    save_masks(&dir.join("masks"), &seq.masks)
}
