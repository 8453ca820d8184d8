//! Scene records, rasterization and the five edit patterns.
//!
//! A scene is drawn onto a canvas covering world coordinates `[-0.5, 1.5]²`
//! at the output pixel pitch; the camera then resamples that canvas
//! bilinearly. At zoom 1 centered on the frame the samples land on canvas
//! pixel centers, so a 2× cut-in equals a bilinear upsample of the
//! condition frame up to quantization.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NUM_COLORS: usize = 8;
pub const NUM_PALETTES: usize = 8;
pub const NUM_ANGLES: usize = 4;
pub const LIGHTING_LEVELS: [f32; 4] = [0.25, 0.5, 0.75, 1.0];
pub const ZOOM_LEVELS: [f32; 4] = [0.5, 1.0, 2.0, 4.0];
pub const SUBJECT_RADII: [f32; 3] = [0.12, 0.16, 0.2];

/// Saturated subject colors.
pub const SUBJECT_COLORS: [[f32; 3]; NUM_COLORS] = [
    [0.90, 0.15, 0.15],
    [0.15, 0.75, 0.20],
    [0.20, 0.30, 0.95],
    [0.95, 0.85, 0.10],
    [0.85, 0.20, 0.85],
    [0.10, 0.85, 0.85],
    [0.95, 0.55, 0.10],
    [0.55, 0.25, 0.90],
];

/// Muted background colors, one per palette.
pub const PALETTE_COLORS: [[f32; 3]; NUM_PALETTES] = [
    [0.55, 0.50, 0.45],
    [0.35, 0.45, 0.55],
    [0.45, 0.55, 0.40],
    [0.60, 0.45, 0.50],
    [0.40, 0.40, 0.60],
    [0.60, 0.58, 0.40],
    [0.42, 0.55, 0.55],
    [0.50, 0.40, 0.38],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn next(self) -> Shape {
        Shape::ALL[(self as usize + 1) % 3]
    }

    fn contains(self, dx: f32, dy: f32, r: f32) -> bool {
        match self {
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
            Shape::Triangle => {
                // Apex up; the base spans the full width at dy = r.
                if dy < -r || dy > r {
                    return false;
                }
                let half_width = r * (dy + r) / (2.0 * r);
                dx.abs() <= half_width
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub shape: Shape,
    /// Index into [`SUBJECT_COLORS`].
    pub color: u8,
    /// Center in world coordinates.
    pub x: f32,
    pub y: f32,
    /// Index into [`SUBJECT_RADII`].
    pub size: u8,
}

impl Subject {
    pub fn radius(&self) -> f32 {
        SUBJECT_RADII[self.size as usize]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub zoom: f32,
    pub cx: f32,
    pub cy: f32,
    pub flip: bool,
    pub angle: u8,
}

impl Default for Camera {
    fn default() -> Self {
        Camera { zoom: 1.0, cx: 0.5, cy: 0.5, flip: false, angle: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub primary: Subject,
    pub secondary: Option<Subject>,
    pub palette: u8,
    /// Multiplies every channel; `[0, 1]`.
    pub lighting: f32,
    pub camera: Camera,
}

impl Scene {
    /// Index of the zoom in [`ZOOM_LEVELS`], if it is one of them.
    pub fn zoom_class(&self) -> Option<usize> {
        ZOOM_LEVELS.iter().position(|&z| z == self.camera.zoom)
    }

    /// Horizontal position of the primary subject in the frame, in `[0, 1]`
    /// when visible.
    pub fn primary_view_x(&self) -> f32 {
        let v = (self.primary.x - self.camera.cx) * self.camera.zoom + 0.5;
        if self.camera.flip {
            1.0 - v
        } else {
            v
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EditPattern {
    #[serde(rename = "shot-reverse-shot")]
    ShotReverseShot,
    #[serde(rename = "cut-in")]
    CutIn,
    #[serde(rename = "cut-out")]
    CutOut,
    #[serde(rename = "cutaway")]
    Cutaway,
    #[serde(rename = "multi-angle")]
    MultiAngle,
}

impl EditPattern {
    pub const ALL: [EditPattern; 5] = [
        EditPattern::ShotReverseShot,
        EditPattern::CutIn,
        EditPattern::CutOut,
        EditPattern::Cutaway,
        EditPattern::MultiAngle,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EditPattern::ShotReverseShot => "shot-reverse-shot",
            EditPattern::CutIn => "cut-in",
            EditPattern::CutOut => "cut-out",
            EditPattern::Cutaway => "cutaway",
            EditPattern::MultiAngle => "multi-angle",
        }
    }
}

impl fmt::Display for EditPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EditPattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EditPattern::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown edit pattern {s:?}")))
    }
}

fn background(palette: u8, angle: u8, wx: f32, wy: f32) -> [f32; 3] {
    // Brightness ramp across the canvas; its direction follows the angle.
    let u = ((wx + 0.5) / 2.0).clamp(0.0, 1.0);
    let v = ((wy + 0.5) / 2.0).clamp(0.0, 1.0);
    let g = match angle % 4 {
        0 => u,
        1 => v,
        2 => 1.0 - u,
        _ => 1.0 - v,
    };
    let b = 0.7 + 0.3 * g;
    PALETTE_COLORS[palette as usize].map(|c| c * b)
}

fn canvas_color(scene: &Scene, wx: f32, wy: f32) -> [f32; 3] {
    let hit = |s: &Subject| s.shape.contains(wx - s.x, wy - s.y, s.radius());
    if hit(&scene.primary) {
        return SUBJECT_COLORS[scene.primary.color as usize];
    }
    if let Some(s) = scene.secondary.as_ref().filter(|s| hit(s)) {
        return SUBJECT_COLORS[s.color as usize];
    }
    background(scene.palette, scene.camera.angle, wx, wy)
}

/// Unlit canvas over world `[-0.5, 1.5]²` with `2·size` pixels per side.
fn render_canvas(scene: &Scene, size: usize) -> Vec<[f32; 3]> {
    let side = 2 * size;
    let pitch = 1.0 / size as f32;
    let mut out = Vec::with_capacity(side * side);
    for i in 0..side {
        let wy = -0.5 + (i as f32 + 0.5) * pitch;
        for j in 0..side {
            let wx = -0.5 + (j as f32 + 0.5) * pitch;
            out.push(canvas_color(scene, wx, wy));
        }
    }
    out
}

fn bilinear(canvas: &[[f32; 3]], side: usize, u: f32, v: f32) -> [f32; 3] {
    let max = (side - 1) as f32;
    let u = u.clamp(0.0, max);
    let v = v.clamp(0.0, max);
    let (j0, i0) = (u.floor() as usize, v.floor() as usize);
    let (j1, i1) = ((j0 + 1).min(side - 1), (i0 + 1).min(side - 1));
    let (fu, fv) = (u - j0 as f32, v - i0 as f32);
    let px = |i: usize, j: usize| canvas[i * side + j];
    let mut out = [0.0; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let top = px(i0, j0)[c] * (1.0 - fu) + px(i0, j1)[c] * fu;
        let bot = px(i1, j0)[c] * (1.0 - fu) + px(i1, j1)[c] * fu;
        *o = top * (1.0 - fv) + bot * fv;
    }
    out
}

/// 8-bit quantization of a `[0, 1]` value.
pub fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Rasterizes `scene` to a `size × size × 3` image with values in `[0, 1]`.
pub fn render_scene(scene: &Scene, size: usize) -> Tensor {
    let canvas = render_canvas(scene, size);
    let side = 2 * size;
    let cam = &scene.camera;
    let mut img = vec![0.0f32; size * size * 3];
    for r in 0..size {
        let wy = cam.cy + ((r as f32 + 0.5) / size as f32 - 0.5) / cam.zoom;
        let v = (wy + 0.5) * size as f32 - 0.5;
        for c in 0..size {
            let wx = cam.cx + ((c as f32 + 0.5) / size as f32 - 0.5) / cam.zoom;
            let u = (wx + 0.5) * size as f32 - 0.5;
            let col = bilinear(&canvas, side, u, v);
            let dst_c = if cam.flip { size - 1 - c } else { c };
            for ch in 0..3 {
                img[(r * size + dst_c) * 3 + ch] = quantize(col[ch] * scene.lighting);
            }
        }
    }
    Tensor::new(vec![size, size, 3], img).expect("image shape")
}

fn zoom_index(zoom: f32) -> Option<usize> {
    ZOOM_LEVELS.iter().position(|&z| z == zoom)
}

/// Keeps the camera's view inside the canvas.
fn clamp_center(c: f32, zoom: f32) -> f32 {
    let half = 0.5 / zoom;
    c.clamp(-0.5 + half, 1.5 - half)
}

/// Applies the scene change an edit pattern implies.
pub fn apply_edit(scene: &Scene, pattern: EditPattern) -> Result<Scene> {
    let mut out = *scene;
    let precondition = |reason: String| Error::Precondition { pattern: pattern.as_str(), reason };
    match pattern {
        EditPattern::CutIn => {
            let idx = zoom_index(scene.camera.zoom)
                .filter(|&i| i + 1 < ZOOM_LEVELS.len())
                .ok_or_else(|| precondition(format!("zoom {} leaves no headroom", scene.camera.zoom)))?;
            let zoom = ZOOM_LEVELS[idx + 1];
            out.camera.zoom = zoom;
            out.camera.cx = clamp_center(scene.primary.x, zoom);
            out.camera.cy = clamp_center(scene.primary.y, zoom);
        }
        EditPattern::CutOut => {
            let idx = zoom_index(scene.camera.zoom)
                .filter(|&i| i > 0)
                .ok_or_else(|| precondition(format!("zoom {} cannot widen further", scene.camera.zoom)))?;
            let zoom = ZOOM_LEVELS[idx - 1];
            out.camera.zoom = zoom;
            if zoom <= 1.0 {
                out.camera.cx = 0.5;
                out.camera.cy = 0.5;
            } else {
                out.camera.cx = clamp_center(scene.camera.cx, zoom);
                out.camera.cy = clamp_center(scene.camera.cy, zoom);
            }
        }
        EditPattern::ShotReverseShot => {
            let secondary = scene.secondary.ok_or_else(|| precondition("scene has no secondary subject".into()))?;
            let mut primary = scene.primary;
            let mut other = secondary;
            // The subjects trade identities; framing slots stay put.
            std::mem::swap(&mut primary.shape, &mut other.shape);
            std::mem::swap(&mut primary.color, &mut other.color);
            out.primary = primary;
            out.secondary = Some(other);
            out.camera.flip = !scene.camera.flip;
        }
        EditPattern::Cutaway => {
            out.primary.shape = scene.primary.shape.next();
            out.primary.color = ((scene.primary.color as usize + 3) % NUM_COLORS) as u8;
            out.primary.x = 1.0 - scene.primary.x;
            if let Some(s) = out.secondary.as_mut() {
                s.x = 1.0 - s.x;
            }
        }
        EditPattern::MultiAngle => {
            out.camera.angle = (scene.camera.angle + 1) % NUM_ANGLES as u8;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample_scene() -> Scene {
        Scene {
            primary: Subject { shape: Shape::Circle, color: 2, x: 0.4, y: 0.5, size: 1 },
            secondary: Some(Subject { shape: Shape::Square, color: 5, x: 0.72, y: 0.45, size: 0 }),
            palette: 3,
            lighting: 0.75,
            camera: Camera::default(),
        }
    }

    #[test]
    fn dark_scene_is_black() {
        let s = Scene { lighting: 0.0, ..sample_scene() };
        assert!(render_scene(&s, 16).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn flip_reverses_columns() {
        let s = sample_scene();
        let mut f = s;
        f.camera.flip = true;
        let (a, b) = (render_scene(&s, 16), render_scene(&f, 16));
        for r in 0..16 {
            for c in 0..16 {
                for ch in 0..3 {
                    assert_eq!(a.data()[(r * 16 + c) * 3 + ch], b.data()[(r * 16 + 15 - c) * 3 + ch]);
                }
            }
        }
    }

    #[test]
    fn rendering_is_deterministic_and_bounded() {
        let s = sample_scene();
        let img = render_scene(&s, 32);
        assert_eq!(img, render_scene(&s, 32));
        assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn cut_in_then_cut_out_restores_zoom() {
        let s = sample_scene();
        let back = apply_edit(&apply_edit(&s, EditPattern::CutIn).unwrap(), EditPattern::CutOut).unwrap();
        assert_eq!(back.camera.zoom, s.camera.zoom);
    }

    #[test]
    fn reverse_shot_is_an_involution() {
        let s = sample_scene();
        let once = apply_edit(&s, EditPattern::ShotReverseShot).unwrap();
        assert_ne!(once.primary, s.primary);
        assert_eq!(once.palette, s.palette);
        assert_eq!(once.lighting, s.lighting);
        assert_eq!(apply_edit(&once, EditPattern::ShotReverseShot).unwrap(), s);
    }

    #[test]
    fn cutaway_and_multi_angle_keep_continuity() {
        let s = sample_scene();
        for p in [EditPattern::Cutaway, EditPattern::MultiAngle] {
            let e = apply_edit(&s, p).unwrap();
            assert_eq!(e.palette.to_le_bytes(), s.palette.to_le_bytes());
            assert_eq!(e.lighting.to_bits(), s.lighting.to_bits());
        }
        let m = apply_edit(&s, EditPattern::MultiAngle).unwrap();
        assert_eq!(m.primary, s.primary);
        assert_ne!(m.camera.angle, s.camera.angle);
        let c = apply_edit(&s, EditPattern::Cutaway).unwrap();
        assert_eq!(c.camera.angle, s.camera.angle);
        assert_ne!(c.primary.shape, s.primary.shape);
    }

    #[test]
    fn unmet_preconditions_name_the_pattern() {
        let mut s = sample_scene();
        s.secondary = None;
        let err = apply_edit(&s, EditPattern::ShotReverseShot).unwrap_err();
        assert!(err.to_string().contains("shot-reverse-shot"));
        s.camera.zoom = 4.0;
        let err = apply_edit(&s, EditPattern::CutIn).unwrap_err();
        assert!(err.to_string().contains("cut-in"));
        s.camera.zoom = 0.5;
        assert!(apply_edit(&s, EditPattern::CutOut).is_err());
    }

    #[test]
    fn cut_in_matches_upsampled_crop() {
        let size = 32;
        let s = sample_scene();
        let cond = render_scene(&s, size);
        let tgt_scene = apply_edit(&s, EditPattern::CutIn).unwrap();
        let tgt = render_scene(&tgt_scene, size);
        // Target pixel (r, c) looks at condition-frame coordinates centered on
        // the subject at half the pixel pitch.
        let cam = tgt_scene.camera;
        let n = size as f32;
        for r in 0..size {
            for c in 0..size {
                let wx = cam.cx + ((c as f32 + 0.5) / n - 0.5) / cam.zoom;
                let wy = cam.cy + ((r as f32 + 0.5) / n - 0.5) / cam.zoom;
                let (u, v) = (wx * n - 0.5, wy * n - 0.5);
                let (j0, i0) = (u.floor() as usize, v.floor() as usize);
                let (fu, fv) = (u - j0 as f32, v - i0 as f32);
                for ch in 0..3 {
                    let px = |i: usize, j: usize| cond.data()[(i * size + j) * 3 + ch];
                    let top = px(i0, j0) * (1.0 - fu) + px(i0, j0 + 1) * fu;
                    let bot = px(i0 + 1, j0) * (1.0 - fu) + px(i0 + 1, j0 + 1) * fu;
                    let up = top * (1.0 - fv) + bot * fv;
                    let got = tgt.data()[(r * size + c) * 3 + ch];
                    assert!((got - up).abs() <= 1.0 / 255.0 + 1e-6, "({r},{c},{ch}): {got} vs {up}");
                }
            }
        }
    }
}
