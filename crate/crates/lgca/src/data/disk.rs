//! On-disk dataset layout:
//!
//! ```text
//! <root>/manifest.cfg            key = value: classes, class_names, tile, stride
//! <root>/<split>/images/*.png    RGB
//! <root>/<split>/masks/*.png     8-bit class indices, 255 = ignore
//! ```

use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3};

use super::{invalid, DataError, SegSample};

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub classes: usize,
    pub class_names: Vec<String>,
    pub tile: usize,
    pub stride: usize,
}

impl Manifest {
    pub fn load(root: &Path) -> Result<Manifest, DataError> {
        let path = root.join("manifest.cfg");
        let text = std::fs::read_to_string(&path).map_err(|source| DataError::Io {
            path: path.clone(),
            source,
        })?;
        let mut classes = None;
        let mut class_names = Vec::new();
        let mut tile = None;
        let mut stride = None;
        for raw in text.lines() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| invalid(format!("manifest line `{raw}` is not key = value")))?;
            let v = v.trim();
            match k.trim() {
                "classes" => {
                    classes =
                        Some(v.parse().map_err(|_| invalid(format!("bad classes `{v}`")))?)
                }
                "class_names" => {
                    class_names = v.split(',').map(|s| s.trim().to_string()).collect()
                }
                "tile" => tile = Some(v.parse().map_err(|_| invalid(format!("bad tile `{v}`")))?),
                "stride" => {
                    stride = Some(v.parse().map_err(|_| invalid(format!("bad stride `{v}`")))?)
                }
                other => return Err(invalid(format!("unknown manifest key `{other}`"))),
            }
        }
        let m = Manifest {
            classes: classes.ok_or_else(|| invalid("manifest missing `classes`"))?,
            class_names,
            tile: tile.ok_or_else(|| invalid("manifest missing `tile`"))?,
            stride: stride.ok_or_else(|| invalid("manifest missing `stride`"))?,
        };
        if m.classes < 2 || m.tile == 0 || m.stride == 0 {
            return Err(invalid("manifest requires classes >= 2 and positive tile/stride"));
        }
        Ok(m)
    }

    pub fn save(&self, root: &Path) -> Result<(), DataError> {
        let text = format!(
            "classes = {}\nclass_names = {}\ntile = {}\nstride = {}\n",
            self.classes,
            self.class_names.join(","),
            self.tile,
            self.stride
        );
        let path = root.join("manifest.cfg");
        std::fs::write(&path, text).map_err(|source| DataError::Io { path, source })
    }
}

pub fn load_image_rgb(path: &Path) -> Result<Array3<f64>, DataError> {
    let img = image::open(path)
        .map_err(|source| DataError::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn(
        (3, h as usize, w as usize),
        |(c, y, x)| img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0,
    ))
}

fn load_mask(path: &Path) -> Result<Array2<i64>, DataError> {
    let img = image::open(path)
        .map_err(|source| DataError::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32)[0] as i64
    }))
}

fn png_names(dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    let mut names: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|source| DataError::Io {
            path: dir.to_path_buf(),
            source,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    names.sort();
    Ok(names)
}

/// Loads one split; image and mask files pair up by file name.
pub fn load_split(root: &Path, split: &str) -> Result<Vec<SegSample>, DataError> {
    let images = png_names(&root.join(split).join("images"))?;
    if images.is_empty() {
        return Err(invalid(format!("no PNG images under {root:?}/{split}/images")));
    }
    let mask_dir = root.join(split).join("masks");
    let mut out = Vec::with_capacity(images.len());
    for img_path in images {
        let name = img_path.file_name().unwrap();
        let mask_path = mask_dir.join(name);
        let sample = SegSample {
            image: load_image_rgb(&img_path)?,
            mask: load_mask(&mask_path)?,
        };
        if sample.mask.dim() != (sample.image.dim().1, sample.image.dim().2) {
            return Err(invalid(format!("{name:?}: image/mask size mismatch")));
        }
        out.push(sample);
    }
    Ok(out)
}

/// Writes samples in the on-disk layout, creating directories as needed.
pub fn save_dataset(
    root: &Path,
    split: &str,
    samples: &[SegSample],
    manifest: &Manifest,
) -> Result<(), DataError> {
    let img_dir = root.join(split).join("images");
    let mask_dir = root.join(split).join("masks");
    for d in [&img_dir, &mask_dir] {
        std::fs::create_dir_all(d).map_err(|source| DataError::Io {
            path: d.clone(),
            source,
        })?;
    }
    for (i, s) in samples.iter().enumerate() {
        let name = format!("{i:05}.png");
        save_rgb(&img_dir.join(&name), &s.image)?;
        save_index_mask(&mask_dir.join(&name), &s.mask)?;
    }
    manifest.save(root)
}

fn save_rgb(path: &Path, image: &Array3<f64>) -> Result<(), DataError> {
    let (_, h, w) = image.dim();
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (image[[0, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (image[[1, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (image[[2, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img.save(path).map_err(|source| DataError::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// 8-bit class-index mask.
pub fn save_index_mask(path: &Path, mask: &Array2<i64>) -> Result<(), DataError> {
    let (h, w) = mask.dim();
    let mut img = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            img.put_pixel(x as u32, y as u32, image::Luma([mask[[y, x]] as u8]));
        }
    }
    img.save(path).map_err(|source| DataError::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Fixed palette for colorized masks; repeats after 16 classes.
pub fn class_color(class: usize) -> [u8; 3] {
    const COLORS: [[u8; 3]; 16] = [
        [0, 0, 0],
        [230, 60, 60],
        [60, 180, 75],
        [60, 100, 220],
        [255, 210, 60],
        [145, 30, 180],
        [70, 240, 240],
        [240, 50, 230],
        [190, 255, 60],
        [250, 150, 110],
        [0, 128, 128],
        [220, 190, 255],
        [170, 110, 40],
        [255, 250, 200],
        [128, 0, 0],
        [170, 255, 195],
    ];
    COLORS[class % COLORS.len()]
}

/// Palette-colorized mask; ignore pixels come out white.
pub fn save_color_mask(path: &Path, mask: &Array2<i64>) -> Result<(), DataError> {
    let (h, w) = mask.dim();
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let m = mask[[y, x]];
            let rgb = if m == super::IGNORE {
                [255, 255, 255]
            } else {
                class_color(m as usize)
            };
            img.put_pixel(x as u32, y as u32, image::Rgb(rgb));
        }
    }
    img.save(path).map_err(|source| DataError::Image {
        path: path.to_path_buf(),
        source,
    })
}
