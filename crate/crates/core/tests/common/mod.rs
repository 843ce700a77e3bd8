#![allow(dead_code)]

pub mod oracle;

use std::f64::consts::PI;
use std::path::Path;

use collage_core::genome::{CanvasSpec, CollageGenome, Compositing, PatchState, RenderMode, PARAMS_PER_PATCH};
use collage_core::image::{RgbImage, RgbaImage};
use collage_core::patches::PatchLibrary;
use collage_core::render::render_canvas;
use rand::Rng;

/// Low-frequency colour field under a soft elliptical alpha that reaches
/// zero before the border texels.
pub fn smooth_patch<R: Rng>(rng: &mut R, w: usize, h: usize) -> RgbaImage {
    smooth_field(rng, w, h, 0.2..0.6, false)
}

/// `opaque` fills alpha with 1 instead of the elliptical falloff.
pub fn smooth_field<R: Rng>(
    rng: &mut R,
    w: usize,
    h: usize,
    base_range: std::ops::Range<f64>,
    opaque: bool,
) -> RgbaImage {
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(base_range.clone()));
    let amp: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.05..0.2) * base[0].min(0.5));
    let fx: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.05..0.2));
    let fy: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.05..0.2));
    let phase: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..2.0 * PI));
    let rx = (w as f64 - 1.0) / 2.0;
    let ry = (h as f64 - 1.0) / 2.0;
    RgbaImage::from_fn(w, h, |x, y| {
        let (x, y) = (x as f64, y as f64);
        let r2 = ((x - rx) / rx).powi(2) + ((y - ry) / ry).powi(2);
        let a = if opaque {
            1.0
        } else if r2 < 1.0 {
            (1.0 - r2).powi(2)
        } else {
            0.0
        };
        let c: [f64; 3] = std::array::from_fn(|k| base[k] + amp[k] * (fx[k] * x + fy[k] * y + phase[k]).sin());
        [c[0] as f32, c[1] as f32, c[2] as f32, a as f32]
    })
}

/// Sharp-edged patch with per-texel noise; used where exact arithmetic
/// rather than smoothness matters.
pub fn noisy_patch<R: Rng>(rng: &mut R, w: usize, h: usize) -> RgbaImage {
    RgbaImage::from_fn(w, h, |_, _| {
        let a = if rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.0..1.0) };
        [rng.random(), rng.random(), rng.random(), a]
    })
}

pub fn library_of(images: Vec<RgbaImage>, target_lo_res: usize) -> PatchLibrary {
    let named = images
        .into_iter()
        .enumerate()
        .map(|(i, img)| (format!("patch{i:02}"), img))
        .collect();
    PatchLibrary::from_images(named, target_lo_res).unwrap()
}

pub fn smooth_library<R: Rng>(rng: &mut R, count: usize) -> PatchLibrary {
    let images = (0..count)
        .map(|_| {
            let w = rng.random_range(10..18);
            let h = rng.random_range(10..18);
            smooth_patch(rng, w, h)
        })
        .collect();
    library_of(images, 1024)
}

pub fn random_state<R: Rng>(rng: &mut R, library_len: usize) -> PatchState {
    let mut s = PatchState::new(rng.random_range(0..library_len));
    s.affine.raw = [
        rng.random_range(-0.6..0.6),
        rng.random_range(-0.6..0.6),
        rng.random_range(-PI..PI),
        rng.random_range(-1.0..1.0),
        rng.random_range(-0.7..0.7),
        rng.random_range(-0.5..0.5),
    ];
    s.color.raw_rgb = std::array::from_fn(|_| rng.random_range(-2.0..2.0));
    s.order_raw = rng.random_range(-2.0..2.0);
    s
}

pub fn random_genome<R: Rng>(
    rng: &mut R,
    library_len: usize,
    max_patches: usize,
    mode: Compositing,
    size: usize,
) -> CollageGenome {
    let n = rng.random_range(1..=max_patches);
    CollageGenome {
        states: (0..n).map(|_| random_state(rng, library_len)).collect(),
        mode: RenderMode::new(mode),
        canvas: CanvasSpec::new(size, size),
        base_scale: rng.random_range(0.3..0.5),
    }
}

pub fn random_image<R: Rng>(rng: &mut R, w: usize, h: usize, lo: f64, hi: f64) -> RgbImage {
    RgbImage::from_fn(w, h, |_, _| std::array::from_fn(|_| rng.random_range(lo..hi)))
}

pub fn dot(a: &RgbImage, b: &RgbImage) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
}

/// Central differences of `L = <upstream, render(genome)>` w.r.t. every raw
/// parameter.
pub fn fd_gradient(
    genome: &CollageGenome,
    library: &PatchLibrary,
    upstream: &RgbImage,
    h: f64,
) -> Vec<[f64; PARAMS_PER_PATCH]> {
    let loss = |g: &CollageGenome| dot(upstream, &render_canvas(g, library).unwrap());
    let mut out = vec![[0.0; PARAMS_PER_PATCH]; genome.states.len()];
    for (i, row) in out.iter_mut().enumerate() {
        for (k, slot) in row.iter_mut().enumerate() {
            let mut plus = genome.clone();
            let mut p = plus.states[i].params();
            p[k] += h;
            plus.states[i].set_params(&p);
            let mut minus = genome.clone();
            let mut p = minus.states[i].params();
            p[k] -= h;
            minus.states[i].set_params(&p);
            *slot = (loss(&plus) - loss(&minus)) / (2.0 * h);
        }
    }
    out
}

/// Relative error with an absolute floor: passes when
/// `|a - b| <= max(rel * max(|a|, |b|), abs_floor)`.
pub fn grad_close(a: f64, b: f64, rel: f64, abs_floor: f64) -> bool {
    (a - b).abs() <= (rel * a.abs().max(b.abs())).max(abs_floor)
}

pub fn write_png(path: &Path, img: &RgbaImage) {
    let bytes: Vec<u8> = img.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    image::save_buffer(path, &bytes, img.width as u32, img.height as u32, image::ExtendedColorType::Rgba8).unwrap();
}

/// Texture whose channels are each `a + b*x + c*y + d*x*y` in texel
/// coordinates, so bilinear sampling reproduces it exactly away from the
/// border and the rendered canvas has no interpolation kinks.
pub fn bilinear_patch<R: Rng>(rng: &mut R, size: usize, rgb: std::ops::Range<f64>, alpha: std::ops::Range<f64>) -> RgbaImage {
    let corners: [[f64; 4]; 4] = std::array::from_fn(|_| {
        std::array::from_fn(|c| {
            if c < 3 {
                rng.random_range(rgb.clone())
            } else {
                rng.random_range(alpha.clone())
            }
        })
    });
    let n = (size - 1) as f64;
    RgbaImage::from_fn(size, size, |x, y| {
        let (fx, fy) = (x as f64 / n, y as f64 / n);
        std::array::from_fn(|c| {
            let v = corners[0][c] * (1.0 - fx) * (1.0 - fy)
                + corners[1][c] * fx * (1.0 - fy)
                + corners[2][c] * (1.0 - fx) * fy
                + corners[3][c] * fx * fy;
            v as f32
        })
    })
}

pub const GRADIENT_TEXTURE: usize = 32;

pub fn gradient_library<R: Rng>(rng: &mut R) -> PatchLibrary {
    let images = (0..4)
        .map(|_| bilinear_patch(rng, GRADIENT_TEXTURE, 0.05..0.2, 0.3..1.0))
        .collect();
    library_of(images, 1024)
}

/// True when every canvas pixel samples strictly inside the texel grid of
/// every patch, keeping the zero-padded border off the canvas.
pub fn border_off_canvas(genome: &CollageGenome, lib: &PatchLibrary) -> bool {
    use collage_core::transforms::{build_matrix, invert_matrix, squash};
    let long = genome.canvas.long_side() as f64;
    genome.states.iter().all(|s| {
        let tex = lib.patches[s.patch_id].level_for(genome.canvas.long_side());
        let half = tex.width.max(tex.height) as f64 / 2.0;
        let inv = invert_matrix(&build_matrix(&squash(&s.affine, genome.base_scale))).unwrap();
        let (w, h) = (genome.canvas.width as f64, genome.canvas.height as f64);
        // Outer pixel centres; the texel map is affine so corners suffice.
        let xs = [(1.0 - w) / long, (w - 1.0) / long];
        let ys = [(1.0 - h) / long, (h - 1.0) / long];
        xs.iter().all(|&nx| {
            ys.iter().all(|&ny| {
                let (ux, uy) = inv.apply(nx, ny);
                let px = ux * half + tex.width as f64 / 2.0 - 0.5;
                let py = uy * half + tex.height as f64 / 2.0 - 0.5;
                px > 0.01 && py > 0.01 && px < tex.width as f64 - 1.01 && py < tex.height as f64 - 1.01
            })
        })
    })
}

/// Random 32x32 genome of 1 to `max_patches` canvas-covering patches with
/// arbitrary rotation, squeeze, shear, colour and order.
///
/// Central differences at step 1e-4 move sample points by ~1e-3 px, far
/// enough to cross a texel line or a coverage edge. Both are kinks (the
/// normalised modes even turn coverage edges into steps of width ~eps), so
/// the genomes keep every such feature off the canvas.
pub fn gradient_genome<R: Rng>(rng: &mut R, lib: &PatchLibrary, mode: Compositing, max_patches: usize) -> CollageGenome {
    let n = rng.random_range(1..=max_patches);
    loop {
        let states = (0..n)
            .map(|_| {
                let mut s = random_state(rng, lib.len());
                s.affine.raw = [
                    rng.random_range(-0.05..0.05),
                    rng.random_range(-0.05..0.05),
                    rng.random_range(-PI..PI),
                    rng.random_range(2.0..3.5),
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-0.2..0.2),
                ];
                s
            })
            .collect();
        let g = CollageGenome {
            states,
            mode: RenderMode::new(mode),
            canvas: CanvasSpec::new(32, 32),
            base_scale: 1.0,
        };
        if border_off_canvas(&g, lib) {
            return g;
        }
    }
}

/// Random upstream gradient built from a few low-frequency waves.
pub fn smooth_upstream<R: Rng>(rng: &mut R, w: usize, h: usize) -> RgbImage {
    let waves: Vec<[f64; 4]> = (0..4)
        .map(|_| {
            [
                rng.random_range(-1.0..1.0),
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
                rng.random_range(0.0..2.0 * PI),
            ]
        })
        .collect();
    let offset: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    RgbImage::from_fn(w, h, |x, y| {
        std::array::from_fn(|c| {
            let (x, y) = (x as f64, y as f64);
            offset[c]
                + waves
                    .iter()
                    .map(|[a, fx, fy, ph]| a * (fx * x + fy * y + ph + c as f64).sin())
                    .sum::<f64>()
        })
    })
}

/// How the in-process critic server answers `/score`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EchoBehaviour {
    /// loss = mean pixel, grad = 1 / (H W 3)
    Echo,
    ServerError,
    MalformedGrad,
    NonFiniteLoss,
}

/// Minimal HTTP/1.1 stand-in for the critic sidecar. Returns the endpoint
/// URL; the server thread lives until the process exits.
pub fn spawn_echo_critic(behaviour: EchoBehaviour) -> String {
    use std::io::{BufRead, BufReader, Read, Write};
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            if reader.read_line(&mut request_line).unwrap_or(0) == 0 {
                continue;
            }
            let mut length = 0;
            let mut proto_ok = false;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let (name, value) = line.split_once(':').unwrap();
                match name.to_ascii_lowercase().as_str() {
                    "content-length" => length = value.trim().parse().unwrap(),
                    "x-critic-proto" => proto_ok = value.trim() == "1",
                    _ => {}
                }
            }
            let mut body = vec![0; length];
            reader.read_exact(&mut body).unwrap();
            let (status, reply) = echo_reply(behaviour, proto_ok, &request_line, &body);
            let _ = write!(
                stream,
                "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                reply.len()
            );
        }
    });
    format!("http://{addr}")
}

fn echo_reply(behaviour: EchoBehaviour, proto_ok: bool, request_line: &str, body: &[u8]) -> (&'static str, String) {
    use collage_core::critics::remote::{ScoreRequest, ScoreResponse};
    if !request_line.starts_with("POST /score ") || !proto_ok {
        return ("400 Bad Request", "{}".into());
    }
    if behaviour == EchoBehaviour::ServerError {
        return ("500 Internal Server Error", "{}".into());
    }
    let req: ScoreRequest = serde_json::from_slice(body).unwrap();
    let pixels = req.decode_pixels().unwrap();
    let n = pixels.data.len() as f64;
    let loss = pixels.data.iter().sum::<f64>() / n;
    let grad = RgbImage::filled(req.width, req.height, [1.0 / n; 3]);
    let mut resp = ScoreResponse::new(loss, &grad);
    match behaviour {
        EchoBehaviour::MalformedGrad => resp.grad_b64 = "@@not base64@@".into(),
        EchoBehaviour::NonFiniteLoss => {
            return ("200 OK", format!("{{\"loss\": 1e999, \"grad_b64\": \"{}\"}}", resp.grad_b64));
        }
        _ => {}
    }
    ("200 OK", serde_json::to_string(&resp).unwrap())
}

/// Soft ellipse whose red channel ramps along x and green along y, so both
/// position and orientation are identifiable from the pixels.
pub fn ramp_patch(w: usize, h: usize) -> RgbaImage {
    let rx = (w as f64 - 1.0) / 2.0;
    let ry = (h as f64 - 1.0) / 2.0;
    RgbaImage::from_fn(w, h, |x, y| {
        let (fx, fy) = (x as f64 / (w - 1) as f64, y as f64 / (h - 1) as f64);
        let r2 = ((x as f64 - rx) / rx).powi(2) + ((y as f64 - ry) / ry).powi(2);
        let a = if r2 < 1.0 { (1.0 - r2).powf(0.5) } else { 0.0 };
        [(0.2 + 0.7 * fx) as f32, (0.2 + 0.7 * fy) as f32, 0.4, a as f32]
    })
}

pub struct PoseTask {
    pub library: PatchLibrary,
    pub hidden: CollageGenome,
    pub start: CollageGenome,
    pub layout: collage_core::critics::RegionLayout,
}

/// Single patch on a 64x64 canvas; the critic's target is the same patch
/// rendered at a pose the optimizer does not see.
pub fn pose_task() -> PoseTask {
    use collage_core::critics::{CriticSpec, RegionLayout};
    let library = library_of(vec![ramp_patch(24, 18)], 1024);
    let mut start = CollageGenome {
        states: vec![PatchState::new(0)],
        mode: RenderMode::new(Compositing::Transparency),
        canvas: CanvasSpec::new(64, 64),
        base_scale: 0.5,
    };
    start.states[0].color.raw_rgb = [2.0; 3];
    let mut hidden = start.clone();
    hidden.states[0].affine.raw[0] = f64::atanh(0.25);
    hidden.states[0].affine.raw[1] = f64::atanh(-0.2);
    hidden.states[0].affine.raw[2] = 0.6;
    hidden.states[0].affine.raw[3] = 0.3;
    let target = render_canvas(&hidden, &library).unwrap();
    let layout = RegionLayout::single(64, CriticSpec::TargetImage { target });
    PoseTask {
        library,
        hidden,
        start,
        layout,
    }
}
