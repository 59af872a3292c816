use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{Curation, DatasetManifest, Domain, ImageSample, Split};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::labels::{LabelVector, SequenceLabel};

pub const IMAGE_MAGIC: &[u8; 8] = b"CMRIMG1\n";

const MANIFEST_HEADER: [&str; 6] = ["patient_id", "study_id", "split", "domain", "label", "image_path"];

/// Writes `image` as magic, `u32` height and width, then `f32` pixels,
/// all little-endian.
pub fn write_image(path: &Path, image: &Tensor) -> Result<()> {
    let (h, w) = match image.shape() {
        [h, w] => (*h, *w),
        other => return Err(Error::shape("write_image", other, &[0, 0])),
    };
    let mut buf = Vec::with_capacity(16 + 4 * h * w);
    buf.extend_from_slice(IMAGE_MAGIC);
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    for &v in image.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let truncated = || Error::Truncated(path.display().to_string());
    if bytes.len() < IMAGE_MAGIC.len() {
        return Err(truncated());
    }
    if &bytes[..8] != IMAGE_MAGIC {
        return Err(Error::MagicMismatch("image"));
    }
    if bytes.len() < 16 {
        return Err(truncated());
    }
    let h = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let w = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() != 4 * h * w {
        return Err(truncated());
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Tensor::new(vec![h, w], data)
}

fn meta_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("meta")
}

/// Writes `<dir>/<stem>.csv`, a `<stem>.meta` sidecar with the curation
/// flags, and one image file per sample under `<dir>/images/`. Returns the
/// CSV path.
pub fn save_manifest(manifest: &DatasetManifest, dir: &Path, stem: &str) -> Result<PathBuf> {
    let image_dir = dir.join("images");
    fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
    let csv_path = dir.join(format!("{stem}.csv"));
    let mut writer = csv::Writer::from_path(&csv_path).map_err(|e| csv_error(&csv_path, e))?;
    writer
        .write_record(MANIFEST_HEADER)
        .map_err(|e| csv_error(&csv_path, e))?;
    for (i, s) in manifest.samples().iter().enumerate() {
        let rel = format!("images/{}.img", s.sample_id());
        write_image(&dir.join(&rel), &s.pixels)?;
        writer
            .write_record([
                s.patient_id(),
                s.study_id(),
                manifest.split_of(i).as_str(),
                s.domain().as_str(),
                s.label().label().as_str(),
                &rel,
            ])
            .map_err(|e| csv_error(&csv_path, e))?;
    }
    writer.flush().map_err(|e| Error::io(&csv_path, e))?;

    let meta = meta_path(&csv_path);
    let c = manifest.curation();
    let mut f = fs::File::create(&meta).map_err(|e| Error::io(&meta, e))?;
    writeln!(
        f,
        "central_slice_fraction={}\ncorrupt_filtered={}",
        c.central_slice_fraction, c.corrupt_filtered
    )
    .map_err(|e| Error::io(&meta, e))?;
    Ok(csv_path)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Parse {
        what: "manifest",
        detail: format!("{}: {e}", path.display()),
    }
}

fn parse_meta(path: &Path) -> Result<Curation> {
    let mut curation = Curation::default();
    let Ok(text) = fs::read_to_string(path) else {
        return Ok(curation);
    };
    let bad = |line: &str| Error::Parse {
        what: "manifest metadata",
        detail: format!("{}: {line:?}", path.display()),
    };
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| bad(line))?;
        match k.trim() {
            "central_slice_fraction" => {
                curation.central_slice_fraction = v.trim().parse().map_err(|_| bad(line))?
            }
            "corrupt_filtered" => curation.corrupt_filtered = v.trim().parse().map_err(|_| bad(line))?,
            _ => return Err(bad(line)),
        }
    }
    Ok(curation)
}

/// Reads a manifest written by [`save_manifest`]. Image paths are resolved
/// relative to the CSV's directory.
pub fn load_manifest(csv_path: &Path) -> Result<DatasetManifest> {
    let base = csv_path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::Reader::from_path(csv_path).map_err(|e| csv_error(csv_path, e))?;
    let header = reader.headers().map_err(|e| csv_error(csv_path, e))?.clone();
    if header.iter().ne(MANIFEST_HEADER) {
        return Err(Error::Parse {
            what: "manifest",
            detail: format!("unexpected header {:?}", header.iter().collect::<Vec<_>>()),
        });
    }
    let mut samples = Vec::new();
    let mut splits = Vec::new();
    for record in reader.records() {
        let r = record.map_err(|e| csv_error(csv_path, e))?;
        let split: Split = r[2].parse()?;
        let domain: Domain = r[3].parse()?;
        let label: SequenceLabel = r[4].parse()?;
        let rel = &r[5];
        let pixels = read_image(&base.join(rel))?;
        let sample_id = Path::new(rel)
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Parse {
                what: "manifest",
                detail: format!("image path {rel:?} has no file name"),
            })?;
        samples.push(ImageSample::new(
            &r[0],
            &r[1],
            sample_id,
            pixels,
            LabelVector::one_hot(label),
            domain,
        )?);
        splits.push(split);
    }
    let mut manifest = DatasetManifest::new(samples)?;
    for (i, s) in splits.into_iter().enumerate() {
        manifest.set_split(i, s);
    }
    manifest.set_curation(parse_meta(&meta_path(csv_path))?);
    Ok(manifest)
}
