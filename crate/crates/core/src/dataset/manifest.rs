use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;

use super::{BBox, GrayImage, LabelVector, Sample};
use crate::error::{Error, Result};

/// Label string meaning "no disease present".
pub const NO_FINDING: &str = "No Finding";

/// Class ordering of the public chest X-ray benchmark.
pub const CHESTXRAY14_CLASSES: [&str; 14] = [
    "Atelectasis",
    "Cardiomegaly",
    "Effusion",
    "Infiltration",
    "Mass",
    "Nodule",
    "Pneumonia",
    "Pneumothorax",
    "Consolidation",
    "Edema",
    "Emphysema",
    "Fibrosis",
    "Pleural_Thickening",
    "Hernia",
];

pub const IMAGES_HEADER: [&str; 3] = ["image_path", "labels", "patient_id"];
pub const BOXES_HEADER: [&str; 6] = ["image_id", "label", "x", "y", "w", "h"];

#[derive(Clone, Debug)]
pub struct ManifestPaths {
    pub images_csv: PathBuf,
    pub boxes_csv: Option<PathBuf>,
}

impl ManifestPaths {
    /// The layout written by [`write_manifest`]: `images.csv` and, when
    /// present, `boxes.csv` inside `dir`.
    pub fn in_dir(dir: &Path) -> Self {
        let boxes = dir.join("boxes.csv");
        ManifestPaths {
            images_csv: dir.join("images.csv"),
            boxes_csv: boxes.exists().then_some(boxes),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MissingImage {
    pub line: u64,
    pub path: PathBuf,
}

#[derive(Debug)]
pub struct LoadedManifest {
    pub samples: Vec<Sample>,
    /// Rows skipped because their image file does not exist.
    pub missing: Vec<MissingImage>,
}

fn class_lookup(classes: &[String]) -> HashMap<&str, usize> {
    classes.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect()
}

fn parse_labels(field: &str, lookup: &HashMap<&str, usize>, classes: usize) -> Result<LabelVector> {
    let mut labels = LabelVector::empty(classes);
    let field = field.trim();
    if field.is_empty() || field == NO_FINDING {
        return Ok(labels);
    }
    for name in field.split('|') {
        let name = name.trim();
        let c = lookup
            .get(name)
            .ok_or_else(|| Error::Schema(format!("unknown label name {name:?}")))?;
        labels.set(*c, true);
    }
    Ok(labels)
}

fn parse_error(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    parse_error(path, line, e.to_string())
}

/// Sample id of an image row: the image file name.
pub(crate) fn id_from_path(image_path: &str) -> String {
    Path::new(image_path)
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| image_path.to_string())
}

/// Loads samples from the two-CSV layout, resizing every image to
/// `resolution` × `resolution` (boxes are scaled along with it). Image paths
/// are resolved relative to the images CSV's directory.
pub fn load_manifest(paths: &ManifestPaths, classes: &[String], resolution: usize) -> Result<LoadedManifest> {
    let lookup = class_lookup(classes);
    let root = paths
        .images_csv
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(&paths.images_csv)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(&paths.images_csv, io),
            other => parse_error(&paths.images_csv, 0, format!("{other:?}")),
        })?;

    let mut samples = Vec::new();
    let mut missing = Vec::new();
    // id -> (index into samples, x scale, y scale)
    let mut index: HashMap<String, (usize, f64, f64)> = HashMap::new();

    for record in reader.records() {
        let record = record.map_err(|e| csv_error(&paths.images_csv, e))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != 3 {
            return Err(parse_error(
                &paths.images_csv,
                line,
                format!("expected 3 columns ({}), got {}", IMAGES_HEADER.join(","), record.len()),
            ));
        }
        let image_path = record[0].trim();
        let labels = parse_labels(&record[1], &lookup, classes.len()).map_err(|e| match e {
            Error::Schema(m) => Error::Schema(format!("{}:{line}: {m}", paths.images_csv.display())),
            other => other,
        })?;
        let patient_id = record[2].trim().to_string();
        if image_path.is_empty() || patient_id.is_empty() {
            return Err(parse_error(&paths.images_csv, line, "empty image_path or patient_id"));
        }

        let full = root.join(image_path);
        if !full.exists() {
            log::warn!("{}:{line}: image file {} is missing", paths.images_csv.display(), full.display());
            missing.push(MissingImage { line, path: full });
            continue;
        }
        let (image, sx, sy) = read_image(&full, resolution)?;
        let id = id_from_path(image_path);
        if index.contains_key(&id) {
            return Err(parse_error(&paths.images_csv, line, format!("duplicate image id {id}")));
        }
        index.insert(id.clone(), (samples.len(), sx, sy));
        samples.push(Sample {
            id,
            image,
            labels,
            patient_id,
            gt_boxes: Vec::new(),
        });
    }

    if let Some(boxes_csv) = &paths.boxes_csv {
        read_boxes(boxes_csv, &lookup, &index, &mut samples)?;
    }
    Ok(LoadedManifest { samples, missing })
}

fn read_boxes(
    path: &Path,
    lookup: &HashMap<&str, usize>,
    index: &HashMap<String, (usize, f64, f64)>,
    samples: &mut [Sample],
) -> Result<()> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => parse_error(path, 0, format!("{other:?}")),
        })?;
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != 6 {
            return Err(parse_error(
                path,
                line,
                format!("expected 6 columns ({}), got {}", BOXES_HEADER.join(","), record.len()),
            ));
        }
        let image_id = record[0].trim();
        let label = record[1].trim();
        let class = *lookup
            .get(label)
            .ok_or_else(|| Error::Schema(format!("{}:{line}: unknown label name {label:?}", path.display())))?;
        let mut nums = [0.0f64; 4];
        for (i, slot) in nums.iter_mut().enumerate() {
            *slot = record[2 + i]
                .trim()
                .parse()
                .map_err(|_| parse_error(path, line, format!("bad number {:?}", &record[2 + i])))?;
        }
        let Some(&(si, sx, sy)) = index.get(image_id) else {
            log::warn!("{}:{line}: box for unknown or missing image {image_id}", path.display());
            continue;
        };
        let bbox = if sx == 1.0 && sy == 1.0 {
            BBox::new(nums[0], nums[1], nums[2], nums[3])
        } else {
            BBox::new(nums[0] * sx, nums[1] * sy, nums[2] * sx, nums[3] * sy)
        }
        .map_err(|e| parse_error(path, line, e.to_string()))?;
        let sample = &mut samples[si];
        if !bbox.fits_in(sample.image.side()) {
            return Err(parse_error(path, line, format!("box {bbox:?} exceeds image bounds")));
        }
        sample.gt_boxes.push((class, bbox));
    }
    Ok(())
}

fn read_image(path: &Path, resolution: usize) -> Result<(GrayImage, f64, f64)> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let luma = img.to_luma8();
    let (w, h) = luma.dimensions();
    let res = resolution as u32;
    let luma = if w == res && h == res {
        luma
    } else {
        image::imageops::resize(&luma, res, res, FilterType::Triangle)
    };
    let gray = GrayImage::from_u8(resolution, luma.as_raw())?;
    Ok((gray, f64::from(res) / f64::from(w), f64::from(res) / f64::from(h)))
}

/// Writes `images.csv`, `boxes.csv`, `classes.txt` and one PNG per sample
/// under `dir/images/`.
pub fn write_manifest(dir: &Path, samples: &[Sample], classes: &[String]) -> Result<ManifestPaths> {
    let images_dir = dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;

    let images_csv = dir.join("images.csv");
    let boxes_csv = dir.join("boxes.csv");
    let mut images = csv::Writer::from_path(&images_csv).map_err(|e| csv_error(&images_csv, e))?;
    let mut boxes = csv::Writer::from_path(&boxes_csv).map_err(|e| csv_error(&boxes_csv, e))?;
    images.write_record(IMAGES_HEADER).map_err(|e| csv_error(&images_csv, e))?;
    boxes.write_record(BOXES_HEADER).map_err(|e| csv_error(&boxes_csv, e))?;

    for s in samples {
        let rel = format!("images/{}", s.id);
        let png = dir.join(&rel);
        let side = s.image.side() as u32;
        let buf = image::GrayImage::from_raw(side, side, s.image.to_u8())
            .ok_or_else(|| Error::Shape(format!("sample {}: bad image buffer", s.id)))?;
        buf.save_with_format(&png, image::ImageFormat::Png)
            .map_err(|source| Error::Image { path: png.clone(), source })?;

        let names: Vec<&str> = s.labels.indices().map(|c| classes[c].as_str()).collect();
        let label_field = if names.is_empty() {
            NO_FINDING.to_string()
        } else {
            names.join("|")
        };
        images
            .write_record([rel.as_str(), label_field.as_str(), s.patient_id.as_str()])
            .map_err(|e| csv_error(&images_csv, e))?;
        for (c, b) in &s.gt_boxes {
            boxes
                .write_record([
                    s.id.clone(),
                    classes[*c].clone(),
                    b.x.to_string(),
                    b.y.to_string(),
                    b.w.to_string(),
                    b.h.to_string(),
                ])
                .map_err(|e| csv_error(&boxes_csv, e))?;
        }
    }
    images.flush().map_err(|e| Error::io(&images_csv, e))?;
    boxes.flush().map_err(|e| Error::io(&boxes_csv, e))?;

    let classes_txt = dir.join("classes.txt");
    fs::write(&classes_txt, classes.join("\n") + "\n").map_err(|e| Error::io(&classes_txt, e))?;

    Ok(ManifestPaths {
        images_csv,
        boxes_csv: Some(boxes_csv),
    })
}

/// Reads a `classes.txt` (one class name per line).
pub fn read_class_names(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let names: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    if names.is_empty() {
        return Err(Error::Schema(format!("{}: no class names", path.display())));
    }
    Ok(names)
}
