//! Dataset files.
//!
//! A split directory holds, per image, `{id}.json` (a [`SampleRecord`]),
//! `{id}.png` (8-bit RGB) and optionally `{id}_depth.npy` (little-endian
//! `float32`, shape `(H, W)`) and `{id}_normals.npy` (`float32`,
//! shape `(H, W, 3)`), both C order.

use std::fs;
use std::io::{BufReader, BufWriter, Cursor};
use std::path::{Path, PathBuf};

use interact3d_core::datamodel::{RgbGrid, SampleRecord};
use interact3d_core::{Grid, SceneSample};
use npyz::WriterBuilder;

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Invalid { path: PathBuf, source: interact3d_core::Error },
}

pub type Result<T, E = IoError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io { path: path.to_path_buf(), source }
}

fn format_err(path: &Path, message: impl ToString) -> IoError {
    IoError::Format { path: path.to_path_buf(), message: message.to_string() }
}

pub fn decode_png(bytes: &[u8]) -> std::result::Result<RgbGrid, image::ImageError> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.pixels().map(|p| p.0).collect();
    Ok(Grid::from_vec(w as usize, h as usize, data).expect("pixel count matches dimensions"))
}

/// Decodes any supported image container (PNG only in this build).
pub fn decode_image(bytes: &[u8]) -> std::result::Result<RgbGrid, image::ImageError> {
    let img = image::load_from_memory(bytes)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.pixels().map(|p| p.0).collect();
    Ok(Grid::from_vec(w as usize, h as usize, data).expect("pixel count matches dimensions"))
}

pub fn encode_png(image: &RgbGrid) -> Vec<u8> {
    let raw: Vec<u8> = image.as_slice().iter().flatten().copied().collect();
    let buf = image::RgbImage::from_raw(image.width() as u32, image.height() as u32, raw).expect("buffer size");
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png).expect("in-memory PNG encoding");
    out.into_inner()
}

pub fn encode_rgba_png(image: &Grid<[u8; 4]>) -> Vec<u8> {
    let raw: Vec<u8> = image.as_slice().iter().flatten().copied().collect();
    let buf = image::RgbaImage::from_raw(image.width() as u32, image.height() as u32, raw).expect("buffer size");
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png).expect("in-memory PNG encoding");
    out.into_inner()
}

pub fn read_image(path: &Path) -> Result<RgbGrid> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_image(&bytes).map_err(|e| format_err(path, e))
}

pub fn write_png(path: &Path, image: &RgbGrid) -> Result<()> {
    fs::write(path, encode_png(image)).map_err(io_err(path))
}

fn write_npy(path: &Path, shape: &[u64], data: impl IntoIterator<Item = f32>) -> Result<()> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = npyz::WriteOptions::new()
        .default_dtype()
        .shape(shape)
        .writer(BufWriter::new(file))
        .begin_nd()
        .map_err(io_err(path))?;
    w.extend(data).map_err(io_err(path))?;
    w.finish().map_err(io_err(path))
}

fn read_npy(path: &Path, shape: &[u64]) -> Result<Vec<f32>> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let npy = npyz::NpyFile::new(BufReader::new(file)).map_err(io_err(path))?;
    if npy.shape() != shape {
        return Err(format_err(path, format!("array shape {:?}, expected {:?}", npy.shape(), shape)));
    }
    if npy.order() != npyz::Order::C {
        return Err(format_err(path, "only C-order arrays are supported"));
    }
    npy.into_vec::<f32>().map_err(|e| format_err(path, e))
}

pub fn write_depth(path: &Path, depth: &Grid<f32>) -> Result<()> {
    write_npy(path, &[depth.height() as u64, depth.width() as u64], depth.as_slice().iter().copied())
}

pub fn read_depth(path: &Path, width: usize, height: usize) -> Result<Grid<f32>> {
    let v = read_npy(path, &[height as u64, width as u64])?;
    Ok(Grid::from_vec(width, height, v).expect("shape checked"))
}

fn write_normals(path: &Path, normals: &Grid<[f32; 3]>) -> Result<()> {
    write_npy(path, &[normals.height() as u64, normals.width() as u64, 3], normals.as_slice().iter().flatten().copied())
}

fn read_normals(path: &Path, width: usize, height: usize) -> Result<Grid<[f32; 3]>> {
    let v = read_npy(path, &[height as u64, width as u64, 3])?;
    let cells = v.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    Ok(Grid::from_vec(width, height, cells).expect("shape checked"))
}

/// Writes `sample` into `dir` and returns the JSON path.
pub fn serialize_sample(dir: &Path, sample: &SceneSample) -> Result<PathBuf> {
    let json_path = dir.join(format!("{}.json", sample.image_id));
    sample.validate().map_err(|source| IoError::Invalid { path: json_path.clone(), source })?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let record = sample.record();
    write_png(&dir.join(&record.image), &sample.image)?;
    if let (Some(name), Some(d)) = (&record.depth, &sample.depth) {
        write_depth(&dir.join(name), d)?;
    }
    if let (Some(name), Some(n)) = (&record.normals, &sample.normals) {
        write_normals(&dir.join(name), n)?;
    }
    let json = serde_json::to_vec_pretty(&record).expect("records always serialize");
    fs::write(&json_path, json).map_err(io_err(&json_path))?;
    Ok(json_path)
}

/// Reads and validates the sample described by a JSON record.
pub fn deserialize_sample(json_path: &Path) -> Result<SceneSample> {
    let bytes = fs::read(json_path).map_err(io_err(json_path))?;
    let record: SampleRecord = serde_json::from_slice(&bytes).map_err(|e| format_err(json_path, e))?;
    let dir = json_path.parent().unwrap_or(Path::new("."));
    let image = read_image(&dir.join(&record.image))?;
    if (image.width(), image.height()) != (record.width, record.height) {
        return Err(format_err(
            json_path,
            format!("image is {}x{}, record says {}x{}", image.width(), image.height(), record.width, record.height),
        ));
    }
    let depth = match &record.depth {
        Some(name) => Some(read_depth(&dir.join(name), record.width, record.height)?),
        None => None,
    };
    let normals = match &record.normals {
        Some(name) => Some(read_normals(&dir.join(name), record.width, record.height)?),
        None => None,
    };
    record.into_sample(image, depth, normals).map_err(|source| IoError::Invalid { path: json_path.to_path_buf(), source })
}

/// JSON records of a split directory, sorted by file name.
pub fn list_split(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.extension().is_some_and(|e| e == "json") {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

pub fn load_split(dir: &Path) -> Result<Vec<SceneSample>> {
    let paths = list_split(dir)?;
    if paths.is_empty() {
        return Err(format_err(dir, "no samples found"));
    }
    paths.iter().map(|p| deserialize_sample(p)).collect()
}
