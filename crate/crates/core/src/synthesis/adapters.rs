//! Source-format adapters producing raw annotation streams.
//!
//! * COCO / LVIS instance JSON with uncompressed RLE segmentations.
//! * Open Images style segmentation CSV (`MaskPath,ImageID,LabelName[,ImagePath]`)
//!   with one PNG mask per instance.
//! * Audio lists: `audio_uri,label,duration_s` with a header, or headerless
//!   VGGSound rows `ytid,start_seconds,label,split` (10 s clips).
//!
//! URIs are returned relative to the annotation file's directory.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::{AnnotationError, RawAudio, RawItem, RawVisual};
use crate::error::{Error, Result};
use crate::types::{rle_encode, BinaryMask, MaskRLE};

/// A `[name=]path` argument naming a source dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationSource {
    pub dataset: Option<String>,
    pub path: PathBuf,
}

impl AnnotationSource {
    pub fn parse(arg: &str) -> Self {
        match arg.split_once('=') {
            Some((name, path)) if !name.is_empty() && !name.contains('/') => Self {
                dataset: Some(name.to_string()),
                path: PathBuf::from(path),
            },
            _ => Self {
                dataset: None,
                path: PathBuf::from(arg),
            },
        }
    }
}

#[derive(Deserialize)]
struct CocoFile {
    #[serde(default)]
    images: Vec<CocoImage>,
    #[serde(default)]
    annotations: Vec<CocoAnnotation>,
    #[serde(default)]
    categories: Vec<CocoCategory>,
}

#[derive(Deserialize)]
struct CocoImage {
    id: u64,
    #[serde(default)]
    file_name: String,
    height: usize,
    width: usize,
}

#[derive(Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

#[derive(Deserialize)]
struct CocoAnnotation {
    #[serde(default)]
    id: u64,
    image_id: u64,
    category_id: u64,
    #[serde(default)]
    segmentation: Option<serde_json::Value>,
}

#[derive(Deserialize)]
struct UncompressedRle {
    size: [usize; 2],
    counts: Vec<u32>,
}

pub fn read_coco_instances(path: &Path, dataset: &str) -> Result<Vec<RawItem<RawVisual>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let coco: CocoFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    let images: HashMap<u64, &CocoImage> = coco.images.iter().map(|i| (i.id, i)).collect();
    let cats: HashMap<u64, &str> = coco.categories.iter().map(|c| (c.id, c.name.as_str())).collect();

    Ok(coco
        .annotations
        .iter()
        .map(|a| {
            let err = |msg: String| AnnotationError {
                origin: format!("{}#ann{}", path.display(), a.id),
                msg,
            };
            let image = images
                .get(&a.image_id)
                .ok_or_else(|| err(format!("unknown image id {}", a.image_id)))?;
            let label = cats
                .get(&a.category_id)
                .ok_or_else(|| err(format!("unknown category id {}", a.category_id)))?;
            let seg = a.segmentation.as_ref().ok_or_else(|| err("missing segmentation".into()))?;
            let rle = match seg {
                serde_json::Value::Object(_) => {
                    let r: UncompressedRle = serde_json::from_value(seg.clone())
                        .map_err(|e| err(format!("unsupported RLE (compressed strings are not read): {e}")))?;
                    MaskRLE { size: r.size, counts: r.counts }
                }
                serde_json::Value::Array(_) => return Err(err("polygon segmentation is not supported".into())),
                _ => return Err(err("unrecognized segmentation".into())),
            };
            Ok(RawVisual {
                source_dataset: dataset.to_string(),
                image_uri: image.file_name.clone(),
                image_size: (image.height, image.width),
                label: label.to_string(),
                mask: rle,
            })
        })
        .collect())
}

pub fn read_openimages_masks(path: &Path, dataset: &str) -> Result<Vec<RawItem<RawVisual>>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let descriptions = load_class_descriptions(&base.join("class-descriptions.csv"))?;
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let headers = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let (mask_col, image_col, label_col) = match (col("MaskPath"), col("ImageID"), col("LabelName")) {
        (Some(m), Some(i), Some(l)) => (m, i, l),
        _ => {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: 1,
                msg: "header must contain MaskPath, ImageID and LabelName".into(),
            })
        }
    };
    let image_path_col = col("ImagePath");

    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let origin = format!("{}:{}", path.display(), i + 2);
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                out.push(Err(AnnotationError { origin, msg: e.to_string() }));
                continue;
            }
        };
        let field = |c: usize| row.get(c).unwrap_or("").trim().to_string();
        let mask_path = field(mask_col);
        let image_id = field(image_col);
        let raw_label = field(label_col);
        let label = descriptions.get(&raw_label).cloned().unwrap_or(raw_label);
        let image_uri = image_path_col
            .map(field)
            .filter(|p| !p.is_empty())
            .unwrap_or_else(|| format!("images/{image_id}.jpg"));
        let item = read_mask_png(&base.join(&mask_path))
            .map(|mask| RawVisual {
                source_dataset: dataset.to_string(),
                image_uri,
                image_size: (mask.height(), mask.width()),
                label,
                mask: rle_encode(&mask),
            })
            .map_err(|msg| AnnotationError { origin, msg });
        out.push(item);
    }
    Ok(out)
}

fn load_class_descriptions(path: &Path) -> Result<HashMap<String, String>> {
    if !path.exists() {
        return Ok(HashMap::new());
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let mut map = HashMap::new();
    for row in reader.records() {
        let row = row.map_err(|e| csv_err(path, e))?;
        if let (Some(mid), Some(name)) = (row.get(0), row.get(1)) {
            map.insert(mid.trim().to_string(), name.trim().to_string());
        }
    }
    Ok(map)
}

fn read_mask_png(path: &Path) -> std::result::Result<BinaryMask, String> {
    let img = image::open(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let gray = img.to_luma8();
    let (w, h) = gray.dimensions();
    let bits = gray.pixels().map(|p| p.0[0] > 0).collect();
    BinaryMask::from_bits(h as usize, w as usize, bits).map_err(|e| e.to_string())
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: e.to_string(),
    }
}

/// Dispatch on extension: `.json` is COCO/LVIS, `.csv` is Open Images.
pub fn read_visual_annotations(src: &AnnotationSource) -> Result<Vec<RawItem<RawVisual>>> {
    let is_json = src.path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if is_json {
        let name = src.dataset.clone().unwrap_or_else(|| "lvis".into());
        read_coco_instances(&src.path, &name)
    } else {
        let name = src.dataset.clone().unwrap_or_else(|| "openimages".into());
        read_openimages_masks(&src.path, &name)
    }
}

const VGGSOUND_CLIP_SECONDS: f64 = 10.0;

pub fn read_audio_annotations(src: &AnnotationSource) -> Result<Vec<RawItem<RawAudio>>> {
    let path = &src.path;
    let dataset = src.dataset.clone().unwrap_or_else(|| "vggsound".into());
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let mut rows = reader.records();
    let first = match rows.next() {
        None => return Ok(Vec::new()),
        Some(r) => r.map_err(|e| csv_err(path, e))?,
    };
    let has_header = first.iter().any(|f| f.trim() == "audio_uri");
    let header_cols: Option<(usize, usize, usize)> = if has_header {
        let col = |name: &str| first.iter().position(|h| h.trim() == name);
        match (col("audio_uri"), col("label"), col("duration_s")) {
            (Some(u), Some(l), Some(d)) => Some((u, l, d)),
            _ => {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: 1,
                    msg: "header must contain audio_uri, label and duration_s".into(),
                })
            }
        }
    } else {
        None
    };

    let parse_row = |row: &csv::StringRecord, line: usize| -> RawItem<RawAudio> {
        let origin = format!("{}:{line}", path.display());
        let get = |c: usize| row.get(c).map(str::trim).unwrap_or("");
        match header_cols {
            Some((u, l, d)) => {
                let duration_s: f64 = get(d).parse().map_err(|_| AnnotationError {
                    origin: origin.clone(),
                    msg: format!("bad duration {:?}", get(d)),
                })?;
                Ok(RawAudio {
                    source_dataset: dataset.clone(),
                    audio_uri: get(u).to_string(),
                    label: get(l).to_string(),
                    duration_s,
                })
            }
            None => {
                if row.len() < 3 {
                    return Err(AnnotationError {
                        origin,
                        msg: format!("expected ytid,start,label[,split], got {} fields", row.len()),
                    });
                }
                let start: u64 = get(1).parse().map_err(|_| AnnotationError {
                    origin: origin.clone(),
                    msg: format!("bad start seconds {:?}", get(1)),
                })?;
                Ok(RawAudio {
                    source_dataset: dataset.clone(),
                    audio_uri: format!("{}_{:06}.wav", get(0), start),
                    label: get(2).to_string(),
                    duration_s: VGGSOUND_CLIP_SECONDS,
                })
            }
        }
    };

    let mut out = Vec::new();
    if !has_header {
        out.push(parse_row(&first, 1));
    }
    for (i, row) in rows.enumerate() {
        let line = i + 2;
        match row {
            Ok(r) => out.push(parse_row(&r, line)),
            Err(e) => out.push(Err(AnnotationError {
                origin: format!("{}:{line}", path.display()),
                msg: e.to_string(),
            })),
        }
    }
    Ok(out)
}
