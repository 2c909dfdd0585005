//! Procedural shapes: one object per image, drawn over a flat background
//! with optional clutter blobs and pixel noise.
//!
//! Class identity is carried by geometry only. Object and background colors
//! are drawn independently per image, so nothing but shape separates the
//! classes.

use std::f64::consts::PI;

use super::{Dataset, Sample, SplitDatasets};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, Rng};

/// The eight shape families, in class-index order.
pub const SHAPE_NAMES: [&str; 8] = ["triangle", "square", "disk", "cross", "ring", "star", "ell", "tee"];

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    /// Number of shape families used (at most 8).
    pub num_classes: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub image_size: usize,
    /// Mean number of clutter blobs per image.
    pub clutter_density: f64,
    /// Rotation range in degrees.
    pub rotation: (f64, f64),
    /// Scale range, relative to `object_radius`.
    pub scale: (f64, f64),
    /// Radius of the object's bounding circle at scale 1, as a fraction of
    /// the image side.
    pub object_radius: f64,
    /// Maximum offset of the object center from the image center, as a
    /// fraction of the image side. Always clipped so the object fits.
    pub max_offset: f64,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 8,
            train_per_class: 250,
            val_per_class: 63,
            image_size: 64,
            clutter_density: 3.0,
            rotation: (0.0, 360.0),
            scale: (0.5, 1.0),
            object_radius: 0.35,
            max_offset: 0.5,
            noise: 0.03,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_classes > SHAPE_NAMES.len() {
            return Err(Error::contract(format!(
                "class count must be in 1..={}, got {}",
                SHAPE_NAMES.len(),
                self.num_classes
            )));
        }
        let (lo, hi) = self.scale;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::contract(format!("invalid scale range {lo}..{hi}")));
        }
        if self.rotation.0 > self.rotation.1 {
            return Err(Error::contract("rotation range is reversed"));
        }
        if self.clutter_density < 0.0 || self.noise < 0.0 || self.max_offset < 0.0 {
            return Err(Error::contract("clutter density, noise and offset must be nonnegative"));
        }
        let size = self.image_size as f64;
        let r_max = hi * self.object_radius * size;
        // the object's bounding circle plus a one-pixel margin must fit
        if 2.0 * (r_max + 1.0) > size {
            return Err(Error::contract(format!(
                "objects of radius up to {r_max:.1}px cannot fit in a {}px image",
                self.image_size
            )));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        SHAPE_NAMES[..self.num_classes].iter().map(|s| s.to_string()).collect()
    }
}

pub fn generate(spec: &SyntheticSpec) -> Result<SplitDatasets> {
    spec.validate()?;
    let split = |id: u64, per_class: usize| -> Dataset {
        let samples = (0..spec.num_classes * per_class)
            .map(|i| {
                let label = i / per_class;
                let mut rng = Rng::new(derive_seed(derive_seed(spec.seed, id), i as u64));
                render(spec, label, &mut rng)
            })
            .collect();
        Dataset {
            samples,
            class_names: spec.class_names(),
            image_size: spec.image_size,
        }
    };
    Ok(SplitDatasets {
        train: split(1, spec.train_per_class),
        val: split(2, spec.val_per_class),
    })
}

fn random_color(rng: &mut Rng) -> [f64; 3] {
    [rng.uniform(), rng.uniform(), rng.uniform()]
}

fn luminance(c: &[f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

fn render(spec: &SyntheticSpec, label: usize, rng: &mut Rng) -> Sample {
    let size = spec.image_size;
    let background = random_color(rng);
    let mut object = random_color(rng);
    while (luminance(&object) - luminance(&background)).abs() < 0.25 {
        object = random_color(rng);
    }

    let mut pixels: Vec<[f64; 3]> = vec![background; size * size];

    let blobs = {
        let base = spec.clutter_density.floor();
        let extra = if rng.uniform() < spec.clutter_density - base { 1.0 } else { 0.0 };
        (base + extra) as usize
    };
    for _ in 0..blobs {
        let color = random_color(rng);
        let radius = rng.range(1.5, 3.5);
        let cx = rng.range(0.0, size as f64);
        let cy = rng.range(0.0, size as f64);
        let (ax, ay) = (rng.range(0.6, 1.0), rng.range(0.6, 1.0));
        for (idx, px) in pixels.iter_mut().enumerate() {
            let dx = ((idx % size) as f64 + 0.5 - cx) / (radius * ax);
            let dy = ((idx / size) as f64 + 0.5 - cy) / (radius * ay);
            if dx * dx + dy * dy <= 1.0 {
                *px = color;
            }
        }
    }

    let scale = rng.range(spec.scale.0, spec.scale.1);
    let radius = scale * spec.object_radius * size as f64;
    let angle = rng.range(spec.rotation.0, spec.rotation.1).to_radians();
    let half = size as f64 / 2.0;
    let reach = (half - radius - 1.0).min(spec.max_offset * size as f64).max(0.0);
    let cx = half + rng.range(-reach, reach);
    let cy = half + rng.range(-reach, reach);
    let (sin, cos) = angle.sin_cos();

    let mut mask = vec![0u8; size * size];
    for (idx, px) in pixels.iter_mut().enumerate() {
        let dx = (idx % size) as f64 + 0.5 - cx;
        let dy = (idx / size) as f64 + 0.5 - cy;
        // rotate into the shape frame and normalize by the bounding radius
        let u = (cos * dx + sin * dy) / radius;
        let v = (-sin * dx + cos * dy) / radius;
        if contains(label, u, v) {
            *px = object;
            mask[idx] = 1;
        }
    }

    let image = pixels
        .iter()
        .flat_map(|c| c.iter().copied())
        .map(|v| {
            let noisy = if spec.noise > 0.0 { v + spec.noise * rng.normal() } else { v };
            (noisy.clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect();
    Sample {
        image,
        label,
        mask: Some(mask),
    }
}

/// Membership test in the unit-circle frame of shape family `label`.
pub fn contains(label: usize, u: f64, v: f64) -> bool {
    let in_rect = |x0: f64, x1: f64, y0: f64, y1: f64| u >= x0 && u <= x1 && v >= y0 && v <= y1;
    match label {
        0 => {
            let verts: Vec<(f64, f64)> = (0..3)
                .map(|k| {
                    let a = PI / 2.0 + k as f64 * 2.0 * PI / 3.0;
                    (0.95 * a.cos(), -0.95 * a.sin())
                })
                .collect();
            in_polygon(&verts, u, v)
        }
        1 => u.abs() <= 0.68 && v.abs() <= 0.68,
        2 => u * u + v * v <= 0.8 * 0.8,
        3 => in_rect(-0.3, 0.3, -0.9, 0.9) || in_rect(-0.9, 0.9, -0.3, 0.3),
        4 => {
            let r2 = u * u + v * v;
            (0.5 * 0.5..=0.9 * 0.9).contains(&r2)
        }
        5 => {
            let verts: Vec<(f64, f64)> = (0..10)
                .map(|k| {
                    let a = PI / 2.0 + k as f64 * PI / 5.0;
                    let r = if k % 2 == 0 { 0.95 } else { 0.42 };
                    (r * a.cos(), -r * a.sin())
                })
                .collect();
            in_polygon(&verts, u, v)
        }
        6 => in_rect(-0.55, -0.1, -0.75, 0.75) || in_rect(-0.55, 0.6, 0.3, 0.75),
        7 => in_rect(-0.7, 0.7, -0.7, -0.3) || in_rect(-0.2, 0.2, -0.7, 0.75),
        _ => false,
    }
}

fn in_polygon(verts: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut inside = false;
    let mut j = verts.len() - 1;
    for i in 0..verts.len() {
        let (xi, yi) = verts[i];
        let (xj, yj) = verts[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}
