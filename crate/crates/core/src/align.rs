//! Landmark-based geometric normalization.
//!
//! Two annotated landmarks (both eyes for frontal faces, one eye and the
//! mouth corner for profiles) are mapped onto fixed target coordinates by the
//! unique similarity transform through those two correspondences. The crop is
//! produced by inverse mapping with bilinear interpolation and zero fill.
//!
//! All coordinates are `(y, x)`: row first, column second. Pixel centers sit
//! at integer coordinates.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub y: f64,
    pub x: f64,
}

impl Point {
    pub const fn new(y: f64, x: f64) -> Self {
        Self { y, x }
    }

    fn sub(self, o: Point) -> Point {
        Point::new(self.y - o.y, self.x - o.x)
    }

    pub fn distance(self, o: Point) -> f64 {
        let d = self.sub(o);
        d.y.hypot(d.x)
    }
}

pub const RIGHT_EYE: &str = "right_eye";
pub const LEFT_EYE: &str = "left_eye";
pub const EYE: &str = "eye";
pub const MOUTH: &str = "mouth";

/// Named landmark annotations of one image.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LandmarkSet {
    points: BTreeMap<String, Point>,
}

impl LandmarkSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, p: Point) {
        self.points.insert(name.into(), p);
    }

    pub fn with(mut self, name: impl Into<String>, p: Point) -> Self {
        self.insert(name, p);
        self
    }

    pub fn get(&self, name: &str) -> Option<Point> {
        self.points.get(name).copied()
    }

    /// Resolves an anchor name. The generic `eye` anchor of profile specs
    /// falls back to whichever single eye is annotated.
    pub fn anchor(&self, name: &str) -> Option<Point> {
        if let Some(p) = self.get(name) {
            return Some(p);
        }
        if name == EYE {
            return match (self.get(RIGHT_EYE), self.get(LEFT_EYE)) {
                (Some(p), None) | (None, Some(p)) => Some(p),
                _ => None,
            };
        }
        None
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Point)> {
        self.points.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Parses `name y x` lines.
    pub fn parse(text: &str) -> Result<Self> {
        let mut set = LandmarkSet::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(' ').collect();
            let ctx = || format!("landmarks line {}", lineno + 1);
            if fields.len() != 3 {
                return Err(Error::parse(ctx(), "expected 'name y x'"));
            }
            let y: f64 = fields[1].parse().map_err(|e| Error::parse(ctx(), e))?;
            let x: f64 = fields[2].parse().map_err(|e| Error::parse(ctx(), e))?;
            if !y.is_finite() || !x.is_finite() {
                return Err(Error::parse(ctx(), "non-finite coordinate"));
            }
            set.insert(fields[0], Point::new(y, x));
        }
        Ok(set)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (name, p) in self.iter() {
            let _ = writeln!(s, "{name} {} {}", p.y, p.x);
        }
        s
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// Output geometry of an aligned crop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSpec {
    pub name: String,
    pub target_height: usize,
    pub target_width: usize,
    pub anchor_a_name: String,
    pub anchor_b_name: String,
    pub anchor_a_target: Point,
    pub anchor_b_target: Point,
    /// Spec to use when this one's anchors are not annotated (eye + mouth
    /// for profile images).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback: Option<Box<AlignmentSpec>>,
}

pub const PRESET_NAMES: [&str; 6] = [
    "arcface112",
    "arcface112-profile",
    "facenet160",
    "facenet160-profile",
    "legacy80x64",
    "legacy80x64-profile",
];

fn two_point(
    name: &str,
    height: usize,
    width: usize,
    a: (&str, f64, f64),
    b: (&str, f64, f64),
) -> AlignmentSpec {
    AlignmentSpec {
        name: name.to_string(),
        target_height: height,
        target_width: width,
        anchor_a_name: a.0.to_string(),
        anchor_b_name: b.0.to_string(),
        anchor_a_target: Point::new(a.1, a.2),
        anchor_b_target: Point::new(b.1, b.2),
        fallback: None,
    }
}

impl AlignmentSpec {
    /// Built-in target geometries. Frontal presets carry their profile
    /// variant as fallback.
    pub fn preset(name: &str) -> Option<AlignmentSpec> {
        let frontal = |n: &str, h, w, re: (f64, f64), le: (f64, f64), profile: &str| {
            let mut s = two_point(n, h, w, (RIGHT_EYE, re.0, re.1), (LEFT_EYE, le.0, le.1));
            s.fallback = AlignmentSpec::preset(profile).map(Box::new);
            s
        };
        let spec = match name {
            "arcface112" => frontal(name, 112, 112, (52., 38.), (52., 74.), "arcface112-profile"),
            "arcface112-profile" => two_point(name, 112, 112, (EYE, 52., 56.), (MOUTH, 91., 56.)),
            "facenet160" => frontal(name, 160, 160, (32., 39.), (32., 120.), "facenet160-profile"),
            "facenet160-profile" => two_point(name, 160, 160, (EYE, 32., 64.), (MOUTH, 106., 64.)),
            "legacy80x64" => frontal(name, 80, 64, (16., 15.), (16., 48.), "legacy80x64-profile"),
            "legacy80x64-profile" => two_point(name, 80, 64, (EYE, 16., 25.), (MOUTH, 52., 25.)),
            _ => return None,
        };
        Some(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let inside = |p: Point| {
            p.y >= 0.0
                && p.x >= 0.0
                && p.y < self.target_height as f64
                && p.x < self.target_width as f64
        };
        if self.target_height == 0 || self.target_width == 0 {
            return Err(Error::Config(format!("{}: empty target size", self.name)));
        }
        if !inside(self.anchor_a_target) || !inside(self.anchor_b_target) {
            return Err(Error::Config(format!(
                "{}: anchor target outside the crop",
                self.name
            )));
        }
        if self.anchor_a_target == self.anchor_b_target {
            return Err(Error::DegenerateAnchors("coincident target anchors"));
        }
        if let Some(f) = &self.fallback {
            f.validate()?;
        }
        Ok(())
    }

    /// Loads a preset by name, or a JSON spec file otherwise.
    pub fn resolve(preset_or_path: &str) -> Result<AlignmentSpec> {
        if let Some(s) = AlignmentSpec::preset(preset_or_path) {
            return Ok(s);
        }
        let path = Path::new(preset_or_path);
        if !path.exists() {
            return Err(Error::Config(format!("unknown preset '{preset_or_path}'")));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: AlignmentSpec =
            serde_json::from_str(&text).map_err(|e| Error::parse("alignment spec", e))?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Similarity transform on `(y, x)` points:
///
/// ```text
/// | y' |   | a  -b |   | y |   | ty |
/// | x' | = | b   a | * | x | + | tx |
/// ```
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityTransform {
    pub a: f64,
    pub b: f64,
    pub ty: f64,
    pub tx: f64,
}

impl SimilarityTransform {
    pub const IDENTITY: SimilarityTransform = SimilarityTransform {
        a: 1.0,
        b: 0.0,
        ty: 0.0,
        tx: 0.0,
    };

    pub fn scale(&self) -> f64 {
        self.a.hypot(self.b)
    }

    /// Rotation angle in radians, in `(-pi, pi]`.
    pub fn rotation(&self) -> f64 {
        self.b.atan2(self.a)
    }

    pub fn translation(&self) -> Point {
        Point::new(self.ty, self.tx)
    }

    pub fn matrix(&self) -> [[f64; 3]; 2] {
        [[self.a, -self.b, self.ty], [self.b, self.a, self.tx]]
    }

    #[inline]
    pub fn apply(&self, p: Point) -> Point {
        Point::new(
            self.a * p.y - self.b * p.x + self.ty,
            self.b * p.y + self.a * p.x + self.tx,
        )
    }

    #[inline]
    pub fn apply_inverse(&self, p: Point) -> Point {
        let det = self.a * self.a + self.b * self.b;
        let dy = p.y - self.ty;
        let dx = p.x - self.tx;
        Point::new(
            (self.a * dy + self.b * dx) / det,
            (-self.b * dy + self.a * dx) / det,
        )
    }
}

/// Solves the unique similarity transform with `T(src_a) = dst_a` and
/// `T(src_b) = dst_b`.
///
/// Treating `(y, x)` as the complex number `y + ix`, the transform is
/// `z -> c z + t` with `c = (dst_b - dst_a) / (src_b - src_a)`.
pub fn solve_transform(
    src_a: Point,
    src_b: Point,
    dst_a: Point,
    dst_b: Point,
) -> Result<SimilarityTransform> {
    let s = src_b.sub(src_a);
    let d = dst_b.sub(dst_a);
    let s_norm2 = s.y * s.y + s.x * s.x;
    if s_norm2 == 0.0 || !s_norm2.is_finite() {
        return Err(Error::DegenerateAnchors("coincident source anchors"));
    }
    if d.y == 0.0 && d.x == 0.0 {
        return Err(Error::DegenerateAnchors("coincident target anchors"));
    }
    // c = d / s = d * conj(s) / |s|^2
    let a = (d.y * s.y + d.x * s.x) / s_norm2;
    let b = (d.x * s.y - d.y * s.x) / s_norm2;
    let ty = dst_a.y - (a * src_a.y - b * src_a.x);
    let tx = dst_a.x - (b * src_a.y + a * src_a.x);
    Ok(SimilarityTransform { a, b, ty, tx })
}

/// Resamples `image` into a `target_height x target_width` crop: output pixel
/// `(i, j)` takes the bilinear value at `T^-1(i, j)`, zero outside the source.
pub fn warp_crop(image: &Image, t: &SimilarityTransform, spec: &AlignmentSpec) -> Image {
    let (h, w, ch) = (spec.target_height, spec.target_width, image.channels());
    let mut data = Vec::with_capacity(h * w * ch);
    for i in 0..h {
        for j in 0..w {
            let src = t.apply_inverse(Point::new(i as f64, j as f64));
            let y0 = src.y.floor();
            let x0 = src.x.floor();
            let fy = src.y - y0;
            let fx = src.x - x0;
            let (y0, x0) = (y0 as i64, x0 as i64);
            for c in 0..ch {
                let v00 = image.get_or_zero(y0, x0, c);
                let v01 = image.get_or_zero(y0, x0 + 1, c);
                let v10 = image.get_or_zero(y0 + 1, x0, c);
                let v11 = image.get_or_zero(y0 + 1, x0 + 1, c);
                // lerp form keeps constant regions exactly constant
                let top = v00 + fx * (v01 - v00);
                let bottom = v10 + fx * (v11 - v10);
                data.push(top + fy * (bottom - top));
            }
        }
    }
    Image::new(h, w, ch, data).expect("spec dimensions are nonzero")
}

/// Transform taking the spec's annotated anchors onto its targets.
pub fn alignment_transform(landmarks: &LandmarkSet, spec: &AlignmentSpec) -> Result<SimilarityTransform> {
    let a = landmarks
        .anchor(&spec.anchor_a_name)
        .ok_or_else(|| Error::MissingLandmark(spec.anchor_a_name.clone()))?;
    let b = landmarks
        .anchor(&spec.anchor_b_name)
        .ok_or_else(|| Error::MissingLandmark(spec.anchor_b_name.clone()))?;
    solve_transform(a, b, spec.anchor_a_target, spec.anchor_b_target)
}

pub fn align_sample(image: &Image, landmarks: &LandmarkSet, spec: &AlignmentSpec) -> Result<Image> {
    let t = alignment_transform(landmarks, spec)?;
    Ok(warp_crop(image, &t, spec))
}

/// Like [`align_sample`], but walks the fallback chain when anchors are
/// missing. Returns the spec that was used.
pub fn align_with_fallback<'s>(
    image: &Image,
    landmarks: &LandmarkSet,
    spec: &'s AlignmentSpec,
) -> Result<(Image, &'s AlignmentSpec)> {
    match align_sample(image, landmarks, spec) {
        Err(Error::MissingLandmark(name)) => match &spec.fallback {
            Some(f) => align_with_fallback(image, landmarks, f),
            None => Err(Error::MissingLandmark(name)),
        },
        other => other.map(|img| (img, spec)),
    }
}
