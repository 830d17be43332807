//! Procedural desk-scale face corpus.
//!
//! Each class is a rendered "identity": fixed face geometry (outline,
//! eyes, brows, nose, mouth, hair) and palette drawn per class, with
//! per-image pose shift, zoom, brightness and noise jitter. Classes get
//! heterogeneous jitter scales on purpose, so intra-class spread varies
//! across identities the way real photo collections do.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::imaging::Image;
use crate::seed::{derive_seed, derive_seed_indexed};

/// Shape of the corpus to generate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeskCorpusSpec {
    pub classes: usize,
    pub images_per_class: usize,
    pub width: usize,
    pub height: usize,
}

impl Default for DeskCorpusSpec {
    fn default() -> Self {
        DeskCorpusSpec {
            classes: 20,
            images_per_class: 30,
            width: 32,
            height: 32,
        }
    }
}

/// One identity's base geometry and palette, all in normalized [0,1]
/// image coordinates.
struct Identity {
    skin: [f64; 3],
    background: [f64; 3],
    hair: [f64; 3],
    mouth_color: [f64; 3],
    face_cx: f64,
    face_cy: f64,
    face_rx: f64,
    face_ry: f64,
    eye_dx: f64,
    eye_y: f64,
    eye_r: f64,
    eye_dark: f64,
    brow_drop: f64,
    brow_thick: f64,
    nose_len: f64,
    mouth_y: f64,
    mouth_w: f64,
    mouth_h: f64,
    hair_top: f64,
    /// Class-specific jitter multiplier; heterogeneous across identities.
    jitter_scale: f64,
}

fn sample_identity(rng: &mut ChaCha8Rng) -> Identity {
    let u: f64 = rng.gen();
    let skin_base = 0.35 + 0.5 * u;
    Identity {
        skin: [
            skin_base,
            skin_base * (0.62 + 0.18 * rng.gen::<f64>()),
            skin_base * (0.42 + 0.22 * rng.gen::<f64>()),
        ],
        background: [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)],
        hair: [
            rng.gen_range(0.05..0.6),
            rng.gen_range(0.03..0.45),
            rng.gen_range(0.02..0.4),
        ],
        mouth_color: [rng.gen_range(0.5..0.85), rng.gen_range(0.15..0.35), rng.gen_range(0.2..0.4)],
        face_cx: 0.5 + rng.gen_range(-0.03..0.03),
        face_cy: 0.54 + rng.gen_range(-0.03..0.03),
        face_rx: rng.gen_range(0.26..0.36),
        face_ry: rng.gen_range(0.34..0.44),
        eye_dx: rng.gen_range(0.10..0.16),
        eye_y: rng.gen_range(-0.14..-0.06),
        eye_r: rng.gen_range(0.028..0.052),
        eye_dark: rng.gen_range(0.05..0.35),
        brow_drop: rng.gen_range(0.05..0.09),
        brow_thick: rng.gen_range(0.012..0.028),
        nose_len: rng.gen_range(0.08..0.14),
        mouth_y: rng.gen_range(0.13..0.20),
        mouth_w: rng.gen_range(0.07..0.14),
        mouth_h: rng.gen_range(0.014..0.03),
        hair_top: rng.gen_range(0.10..0.22),
        jitter_scale: rng.gen_range(0.4..1.6),
    }
}

/// Per-image pose/photometric jitter.
struct Jitter {
    dx: f64,
    dy: f64,
    zoom: f64,
    brightness: f64,
    gains: [f64; 3],
    eye_scale: f64,
    mouth_scale: f64,
    noise_seed: u64,
}

fn sample_jitter(rng: &mut ChaCha8Rng, scale: f64) -> Jitter {
    Jitter {
        dx: rng.gen_range(-0.035..0.035) * scale,
        dy: rng.gen_range(-0.035..0.035) * scale,
        zoom: 1.0 + rng.gen_range(-0.05..0.05) * scale,
        brightness: 1.0 + rng.gen_range(-0.11..0.11) * scale,
        gains: [
            1.0 + rng.gen_range(-0.03..0.03) * scale,
            1.0 + rng.gen_range(-0.03..0.03) * scale,
            1.0 + rng.gen_range(-0.03..0.03) * scale,
        ],
        eye_scale: 1.0 + rng.gen_range(-0.12..0.12) * scale,
        mouth_scale: 1.0 + rng.gen_range(-0.12..0.12) * scale,
        noise_seed: rng.gen(),
    }
}

#[inline]
fn smoothstep(edge0: f64, edge1: f64, x: f64) -> f64 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Soft inside-mask of an axis-aligned ellipse; `soft` is the edge width
/// in normalized units.
#[inline]
fn ellipse_mask(u: f64, v: f64, cx: f64, cy: f64, rx: f64, ry: f64, soft: f64) -> f64 {
    let q = ((u - cx) / rx).powi(2) + ((v - cy) / ry).powi(2);
    1.0 - smoothstep(1.0 - soft, 1.0 + soft, q)
}

#[inline]
fn mix(dst: &mut [f64; 3], src: [f64; 3], alpha: f64) {
    for c in 0..3 {
        dst[c] = dst[c] * (1.0 - alpha) + src[c] * alpha;
    }
}

fn render_face(id: &Identity, jit: &Jitter, width: usize, height: usize) -> Image {
    let mut noise = ChaCha8Rng::seed_from_u64(jit.noise_seed);
    let cx = id.face_cx + jit.dx;
    let cy = id.face_cy + jit.dy;
    let rx = id.face_rx * jit.zoom;
    let ry = id.face_ry * jit.zoom;
    let eye_r = id.eye_r * jit.eye_scale * jit.zoom;
    let mouth_w = id.mouth_w * jit.mouth_scale * jit.zoom;
    let soft = 0.10;

    let mut pixels = vec![0.0; height * width * 3];
    for y in 0..height {
        for x in 0..width {
            let u = (x as f64 + 0.5) / width as f64;
            let v = (y as f64 + 0.5) / height as f64;

            // Background with a vertical fade.
            let fade = 1.0 - 0.25 * v;
            let mut color = [
                id.background[0] * fade,
                id.background[1] * fade,
                id.background[2] * fade,
            ];

            // Hair: a larger ellipse behind/above the face.
            let hair = ellipse_mask(u, v, cx, cy - 0.06 * jit.zoom, rx * 1.22, ry * 1.12, soft);
            mix(&mut color, id.hair, hair);

            // Face skin.
            let face = ellipse_mask(u, v, cx, cy, rx, ry, soft);
            mix(&mut color, id.skin, face);

            // Hair fringe on top of the face.
            let fringe_line = cy - ry + id.hair_top * jit.zoom;
            let fringe = face * (1.0 - smoothstep(fringe_line - 0.03, fringe_line + 0.03, v));
            mix(&mut color, id.hair, fringe);

            // Eyes and pupils.
            let ey = cy + id.eye_y * jit.zoom;
            for side in [-1.0, 1.0] {
                let ex = cx + side * id.eye_dx * jit.zoom;
                let white = ellipse_mask(u, v, ex, ey, eye_r * 1.5, eye_r, 0.25);
                mix(&mut color, [0.92, 0.92, 0.9], white * face);
                let pupil = ellipse_mask(u, v, ex, ey, eye_r * 0.55, eye_r * 0.8, 0.3);
                mix(
                    &mut color,
                    [id.eye_dark, id.eye_dark, id.eye_dark * 1.3],
                    pupil * face,
                );

                // Brow: a dark soft bar above the eye.
                let by = ey - id.brow_drop * jit.zoom;
                let brow_x = 1.0 - smoothstep(eye_r * 1.7, eye_r * 2.1, (u - ex).abs());
                let brow_y = 1.0 - smoothstep(id.brow_thick, id.brow_thick * 1.8, (v - by).abs());
                let brow = brow_x * brow_y * face;
                mix(&mut color, [id.hair[0] * 0.7, id.hair[1] * 0.7, id.hair[2] * 0.7], brow);
            }

            // Nose: a subtle vertical shading line.
            let nose_top = cy - 0.02;
            let nose_bot = nose_top + id.nose_len * jit.zoom;
            let nose_x = 1.0 - smoothstep(0.012, 0.03, (u - cx).abs());
            let nose_y = smoothstep(nose_top - 0.02, nose_top, v)
                * (1.0 - smoothstep(nose_bot, nose_bot + 0.02, v));
            let nose = nose_x * nose_y * face * 0.45;
            mix(
                &mut color,
                [id.skin[0] * 0.75, id.skin[1] * 0.7, id.skin[2] * 0.7],
                nose,
            );

            // Mouth: a soft horizontal bar.
            let my = cy + id.mouth_y * jit.zoom;
            let mouth_x = 1.0 - smoothstep(mouth_w, mouth_w * 1.5, (u - cx).abs());
            let mouth_y =
                1.0 - smoothstep(id.mouth_h, id.mouth_h * 1.9, (v - my).abs());
            mix(&mut color, id.mouth_color, mouth_x * mouth_y * face);

            // Photometric jitter and sensor noise.
            let idx = y * width + x;
            for c in 0..3 {
                let n: f64 = noise.gen_range(-0.02..0.02);
                let val = color[c] * jit.brightness * jit.gains[c] + n;
                pixels[(c * height + y) * width + x] = val.clamp(0.0, 1.0);
            }
            let _ = idx;
        }
    }
    Image::new(height, width, 3, pixels).expect("rendered pixels are clamped")
}

/// Renders one class's images.
pub fn generate_class_images(spec: &DeskCorpusSpec, seed: u64, class: usize) -> Vec<Image> {
    let mut class_rng =
        ChaCha8Rng::seed_from_u64(derive_seed_indexed(seed, "identity", class as u64));
    let identity = sample_identity(&mut class_rng);
    let img_seed = derive_seed_indexed(seed, "images", class as u64);
    (0..spec.images_per_class)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_indexed(img_seed, "img", i as u64));
            let jit = sample_jitter(&mut rng, identity.jitter_scale);
            render_face(&identity, &jit, spec.width, spec.height)
        })
        .collect()
}

/// Generates the corpus on disk as `root/class_XX/img_XX.png`.
pub fn make_desk_corpus(spec: &DeskCorpusSpec, root: impl AsRef<Path>, seed: u64) -> Result<()> {
    let root = root.as_ref();
    for class in 0..spec.classes {
        let images = generate_class_images(spec, seed, class);
        for (i, img) in images.iter().enumerate() {
            img.save_png(root.join(format!("class_{class:02}/img_{i:02}.png")))?;
        }
    }
    Ok(())
}

/// Seed stream for corpus generation derived from a master seed, so a
/// second corpus (different identities) comes from the same master.
pub fn corpus_seed(master: u64, name: &str) -> u64 {
    derive_seed(master, &format!("corpus/{name}"))
}
