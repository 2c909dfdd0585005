//! Labeled images with optional ground-truth masks.
//!
//! On-disk layout (written by [`write_dataset`]):
//!
//! ```text
//! <root>/manifest.csv                      split,path,class_index
//! <root>/<split>/labels.csv                class,index
//! <root>/<split>/<class>/NNNN.ppm          P6 image
//! <root>/<split>/<class>/NNNN.mask.pgm     P5 mask, 0 or 255
//! ```

pub mod netpbm;
pub mod synthetic;

use std::fs;
use std::path::Path;

use log::warn;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use synthetic::{generate, SyntheticSpec, SHAPE_NAMES};

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `H x W x 3` RGB, row-major.
    pub image: Vec<u8>,
    pub label: usize,
    /// `H x W`, 1 on the object; evaluation only.
    pub mask: Option<Vec<u8>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub class_names: Vec<String>,
    pub image_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitDatasets {
    pub train: Dataset,
    pub val: Dataset,
}

impl Sample {
    /// Image as an `[H, W, 3]` tensor in `[0, 1]`.
    pub fn image_tensor(&self, size: usize) -> Tensor {
        let data = self.image.iter().map(|&v| f64::from(v) / 255.0).collect();
        Tensor::new(vec![size, size, 3], data).expect("image matches dataset size")
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn has_masks(&self) -> bool {
        !self.samples.is_empty() && self.samples.iter().all(|s| s.mask.is_some())
    }

    /// Sample indices grouped by label.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.num_classes()];
        for (i, s) in self.samples.iter().enumerate() {
            groups[s.label].push(i);
        }
        groups
    }

    /// Copy keeping only the first `per_class` samples of every class.
    pub fn take_per_class(&self, per_class: usize) -> Dataset {
        let mut counts = vec![0; self.num_classes()];
        let samples = self
            .samples
            .iter()
            .filter(|s| {
                counts[s.label] += 1;
                counts[s.label] <= per_class
            })
            .cloned()
            .collect();
        Dataset {
            samples,
            class_names: self.class_names.clone(),
            image_size: self.image_size,
        }
    }
}

/// Block-averages an `H x W` binary mask to `n x n`, marking blocks with at
/// least half coverage.
pub fn downsample_mask(mask: &[u8], size: usize, n: usize) -> Result<Tensor> {
    if n == 0 || !size.is_multiple_of(n) {
        return Err(Error::contract(format!("grid side {n} does not divide image side {size}")));
    }
    if mask.len() != size * size {
        return Err(Error::shape("downsample_mask", format!("{} pixels for a {size}x{size} mask", mask.len())));
    }
    let block = size / n;
    let area = (block * block) as f64;
    let mut out = vec![0.0; n * n];
    for (idx, &m) in mask.iter().enumerate() {
        if m != 0 {
            out[(idx / size / block) * n + (idx % size) / block] += 1.0;
        }
    }
    for v in &mut out {
        *v = if *v / area >= 0.5 { 1.0 } else { 0.0 };
    }
    Tensor::new(vec![n, n], out)
}

/// Writes `<root>/<split>/<class>/NNNN.ppm` (+ `.mask.pgm`) and `manifest.csv`.
pub fn write_dataset(root: &Path, splits: &[(&str, &Dataset)]) -> Result<()> {
    fs::create_dir_all(root)?;
    let mut manifest = csv::Writer::from_path(root.join("manifest.csv")).map_err(csv_error)?;
    manifest.write_record(["split", "path", "class_index"]).map_err(csv_error)?;
    for (split, data) in splits {
        let split_dir = root.join(split);
        fs::create_dir_all(&split_dir)?;
        let mut labels = csv::Writer::from_path(split_dir.join("labels.csv")).map_err(csv_error)?;
        for (i, name) in data.class_names.iter().enumerate() {
            labels.write_record([name.clone(), i.to_string()]).map_err(csv_error)?;
        }
        labels.flush()?;
        let mut counters = vec![0usize; data.num_classes()];
        for sample in &data.samples {
            let class = &data.class_names[sample.label];
            let dir = root.join(split).join(class);
            fs::create_dir_all(&dir)?;
            let stem = format!("{:04}", counters[sample.label]);
            counters[sample.label] += 1;
            let size = data.image_size;
            netpbm::write_ppm(&dir.join(format!("{stem}.ppm")), size, size, &sample.image)?;
            if let Some(mask) = &sample.mask {
                let gray: Vec<u8> = mask.iter().map(|&m| if m != 0 { 255 } else { 0 }).collect();
                netpbm::write_pgm(&dir.join(format!("{stem}.mask.pgm")), size, size, &gray)?;
            }
            let rel = format!("{split}/{class}/{stem}.ppm");
            manifest
                .write_record([split.to_string(), rel, sample.label.to_string()])
                .map_err(csv_error)?;
        }
    }
    manifest.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::contract(format!("csv: {other:?}")),
    }
}

/// Loads `<root>/<class-name>/*.ppm`, resizing to `size x size`.
///
/// Class indices follow sorted class-name order unless `<root>/labels.csv`
/// (`class,index` rows) overrides them. A `NNNN.mask.pgm` next to an image is
/// loaded as its mask. Other files are skipped with a warning.
pub fn load_folder(root: &Path, size: usize) -> Result<Dataset> {
    let mut class_dirs: Vec<String> = fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::contract(format!("no class folders under {}", root.display())));
    }

    let mut indices: Vec<(String, usize)> = class_dirs.iter().cloned().zip(0..).collect();
    let labels_path = root.join("labels.csv");
    if labels_path.exists() {
        indices = read_label_overrides(&labels_path, &class_dirs)?;
        indices.sort_by_key(|(_, i)| *i);
    }
    let num_classes = indices.iter().map(|(_, i)| i + 1).max().unwrap_or(0);
    let mut class_names = vec![String::new(); num_classes];
    for (name, i) in &indices {
        class_names[*i] = name.clone();
    }

    let mut samples = Vec::new();
    for (class, label) in &indices {
        let dir = root.join(class);
        let mut files: Vec<_> = fs::read_dir(&dir)?.filter_map(|e| e.ok()).map(|e| e.path()).collect();
        files.sort();
        let mut found = 0;
        for path in &files {
            let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            if name.ends_with(".mask.pgm") {
                continue;
            }
            if !name.ends_with(".ppm") {
                warn!("skipping non-image file {}", path.display());
                continue;
            }
            let img = netpbm::read_ppm(path)?;
            let image = resize_bilinear(&img, size);
            let mask_path = path.with_file_name(name.trim_end_matches(".ppm").to_string() + ".mask.pgm");
            let mask = if mask_path.exists() {
                let m = netpbm::read_pgm(&mask_path)?;
                Some(resize_nearest(&m, size).into_iter().map(|v| u8::from(v >= 128)).collect())
            } else {
                None
            };
            samples.push(Sample {
                image,
                label: *label,
                mask,
            });
            found += 1;
        }
        if found == 0 {
            return Err(Error::contract(format!("class folder {} has no images", dir.display())));
        }
    }
    Ok(Dataset {
        samples,
        class_names,
        image_size: size,
    })
}

/// Loads a dataset directory. A directory with `train/` (and optionally
/// `val/`) subfolders, as written by [`write_dataset`], yields both splits;
/// any other directory is loaded as a single training split.
pub fn load_splits(root: &Path, size: usize) -> Result<(Dataset, Option<Dataset>)> {
    if !root.is_dir() {
        return Err(Error::contract(format!("dataset directory {} does not exist", root.display())));
    }
    let train_dir = root.join("train");
    if train_dir.is_dir() {
        let train = load_folder(&train_dir, size)?;
        let val_dir = root.join("val");
        let val = if val_dir.is_dir() { Some(load_folder(&val_dir, size)?) } else { None };
        Ok((train, val))
    } else {
        Ok((load_folder(root, size)?, None))
    }
}

fn read_label_overrides(path: &Path, class_dirs: &[String]) -> Result<Vec<(String, usize)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let mut overrides = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::format(path, e.to_string()))?;
        let (Some(name), Some(index)) = (record.get(0), record.get(1)) else {
            return Err(Error::format(path, "rows must be `class,index`"));
        };
        let index: usize = index
            .trim()
            .parse()
            .map_err(|_| Error::format(path, format!("bad class index `{index}`")))?;
        overrides.push((name.trim().to_string(), index));
    }
    let mut out = Vec::new();
    for dir in class_dirs {
        match overrides.iter().find(|(n, _)| n == dir) {
            Some(entry) => out.push(entry.clone()),
            None => return Err(Error::format(path, format!("no index for class `{dir}`"))),
        }
    }
    Ok(out)
}

fn resize_bilinear(img: &netpbm::Image8, size: usize) -> Vec<u8> {
    if img.width == size && img.height == size {
        return img.data.clone();
    }
    let c = img.channels;
    let sx = img.width as f64 / size as f64;
    let sy = img.height as f64 / size as f64;
    let mut out = Vec::with_capacity(size * size * c);
    for y in 0..size {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (img.height - 1) as f64);
        let (y0, ty) = (fy.floor() as usize, fy - fy.floor());
        let y1 = (y0 + 1).min(img.height - 1);
        for x in 0..size {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (img.width - 1) as f64);
            let (x0, tx) = (fx.floor() as usize, fx - fx.floor());
            let x1 = (x0 + 1).min(img.width - 1);
            for ch in 0..c {
                let at = |yy: usize, xx: usize| f64::from(img.data[(yy * img.width + xx) * c + ch]);
                let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
                let bottom = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
                out.push((top * (1.0 - ty) + bottom * ty).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    out
}

fn resize_nearest(img: &netpbm::Image8, size: usize) -> Vec<u8> {
    (0..size * size)
        .map(|i| {
            let (y, x) = (i / size, i % size);
            let sy = (y * img.height) / size;
            let sx = (x * img.width) / size;
            img.data[(sy * img.width + sx) * img.channels]
        })
        .collect()
}
