//! Reconstruction and attention rendering.
//!
//! Every figure is a grayscale composite of panels laid out left to right
//! with a gutter between them. Values are mapped to pixels per panel by a
//! min/max affine onto [0, 255]; each panel's range lands in a `.meta`
//! sidecar next to the P6 PPM so the mapping stays invertible. Images put
//! low frequencies at the bottom row, the usual spectrogram orientation.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::frontend::Spectrogram;
use crate::model::{attention_last_layer, reconstruct, ModelParams};
use crate::patch::{patchify, random_mask_plan, unpatchify, MaskPlan, PatchConfig};
use crate::rng::{derive_seed, stream};

/// Pixels between panels in a composite image.
pub const GUTTER: usize = 4;
const GUTTER_GRAY: u8 = 128;

/// Mask ratios swept by default, lowest to highest.
pub const SWEEP_RATIOS: [f64; 8] = [0.40, 0.50, 0.60, 0.75, 0.90, 0.95, 0.98, 0.99];

/// Ratios above this threshold get visible-patch outlines in sweep images.
pub const SWEEP_OUTLINE_ABOVE: f64 = 0.75;

/// Grayscale value image, row-major, row 0 at the top.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub data: Vec<f32>,
    pub height: usize,
    pub width: usize,
}

impl GrayImage {
    pub fn new(height: usize, width: usize) -> Self {
        Self { data: vec![0.0; height * width], height, width }
    }

    /// Copy a spectrogram flipped vertically so mel 0 is the bottom row.
    pub fn from_spectrogram(spec: &Spectrogram) -> Self {
        let (h, w) = (spec.n_mels, spec.n_frames);
        let mut data = vec![0.0; h * w];
        for r in 0..h {
            let mel = h - 1 - r;
            data[r * w..(r + 1) * w]
                .copy_from_slice(&spec.data[mel * w..(mel + 1) * w]);
        }
        Self { data, height: h, width: w }
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.width + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.width + c] = v;
    }
}

/// Pixel-space rectangle within one panel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixRect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Pixel rectangle of grid cell (f, t) in a vertically flipped image.
fn cell_rect(f: usize, t: usize, patch: &PatchConfig, image_height: usize) -> PixRect {
    PixRect {
        top: image_height - (f + 1) * patch.p_f,
        left: t * patch.p_t,
        height: patch.p_f,
        width: patch.p_t,
    }
}

/// Input, composed reconstruction, and per-pixel absolute error.
///
/// All three panels share dimensions; the error panel is non-negative and
/// renders inverted (darker pixels mean larger error).
#[derive(Debug, Clone, PartialEq)]
pub struct Triptych {
    pub input: GrayImage,
    pub reconstruction: GrayImage,
    pub error: GrayImage,
    /// Outlines of the visible patches, drawn on the reconstruction panel.
    pub visible_outlines: Vec<PixRect>,
}

impl Triptych {
    /// Quantize the three panels into one `[input | recon | error]` image.
    pub fn compose(&self) -> Result<Composite> {
        compose_panels(&self.panels())
    }

    fn panels(&self) -> [Panel<'_>; 3] {
        [
            Panel { name: "input", image: &self.input, invert: false, outlines: &[] },
            Panel {
                name: "reconstruction",
                image: &self.reconstruction,
                invert: false,
                outlines: &self.visible_outlines,
            },
            Panel { name: "error", image: &self.error, invert: true, outlines: &[] },
        ]
    }

    /// Emit `<base>.ppm` and `<base>.meta` (any extension on `base` is
    /// replaced).
    pub fn write(&self, base: &Path) -> Result<()> {
        write_panels(base, &self.panels())
    }
}

/// Reconstruct and paste original patches back over visible positions
/// (`raw_everywhere` keeps the decoder output at every position instead).
pub fn composite_reconstruction(
    spec: &Spectrogram,
    params: &ModelParams<f32>,
    plan: &MaskPlan,
    raw_everywhere: bool,
) -> Result<Spectrogram> {
    let mut pred = reconstruct(spec, plan, params)?;
    let (orig, grid) = patchify(spec, &params.cfg.patch)?;
    if !raw_everywhere {
        for &i in plan.visible_indices() {
            pred.token_mut(i).copy_from_slice(orig.token(i));
        }
    }
    unpatchify(&pred, &grid, &params.cfg.patch)
}

/// Mean squared difference over every pixel of two equal-shape spectrograms.
pub fn full_spectrogram_mse(a: &Spectrogram, b: &Spectrogram) -> Result<f32> {
    if a.n_mels != b.n_mels || a.n_frames != b.n_frames {
        return Err(Error::Shape(format!(
            "cannot compare {}x{} against {}x{}",
            a.n_mels, a.n_frames, b.n_mels, b.n_frames
        )));
    }
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = (x - y) as f64;
            d * d
        })
        .sum();
    Ok((sum / a.data.len() as f64) as f32)
}

fn render_with(
    spec: &Spectrogram,
    params: &ModelParams<f32>,
    plan: &MaskPlan,
    show_visible: bool,
    raw_everywhere: bool,
) -> Result<Triptych> {
    let composed = composite_reconstruction(spec, params, plan, raw_everywhere)?;
    let input = GrayImage::from_spectrogram(spec);
    let reconstruction = GrayImage::from_spectrogram(&composed);
    let error = GrayImage {
        data: input
            .data
            .iter()
            .zip(&reconstruction.data)
            .map(|(&a, &b)| (a - b).abs())
            .collect(),
        height: input.height,
        width: input.width,
    };
    let grid = params.cfg.grid()?;
    let visible_outlines = if show_visible {
        plan.visible_indices()
            .iter()
            .map(|&i| cell_rect(i / grid.n_t, i % grid.n_t, &params.cfg.patch, input.height))
            .collect()
    } else {
        Vec::new()
    };
    Ok(Triptych { input, reconstruction, error, visible_outlines })
}

/// Render input, reconstruction, and error panels for one mask plan.
///
/// Visible positions show the original patches; `show_visible` outlines
/// them in white on the reconstruction panel. Wherever the plan keeps a
/// patch visible the error panel is exactly zero.
pub fn render_reconstruction(
    spec: &Spectrogram,
    params: &ModelParams<f32>,
    plan: &MaskPlan,
    show_visible: bool,
) -> Result<Triptych> {
    render_with(spec, params, plan, show_visible, false)
}

/// Like [`render_reconstruction`] but showing raw decoder output at every
/// position, visible ones included.
pub fn render_reconstruction_raw(
    spec: &Spectrogram,
    params: &ModelParams<f32>,
    plan: &MaskPlan,
    show_visible: bool,
) -> Result<Triptych> {
    render_with(spec, params, plan, show_visible, true)
}

/// One swept ratio: its plan's reconstruction and whole-image MSE.
#[derive(Debug, Clone)]
pub struct SweepEntry {
    pub ratio: f64,
    pub mse: f32,
    pub triptych: Triptych,
}

/// Reconstruction quality across mask ratios, ascending.
#[derive(Debug, Clone)]
pub struct SweepReport {
    pub entries: Vec<SweepEntry>,
}

impl SweepReport {
    /// `ratio,mse` CSV, one row per entry.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "ratio,mse")?;
        for e in &self.entries {
            writeln!(w, "{},{}", e.ratio, e.mse)?;
        }
        Ok(())
    }

    /// One triptych per entry: `mask-040.ppm` for ratio 0.40, and so on.
    pub fn write_images(&self, dir: &Path) -> Result<()> {
        for e in &self.entries {
            let pct = (e.ratio * 100.0).round() as u32;
            e.triptych.write(&dir.join(format!("mask-{pct:03}")))?;
        }
        Ok(())
    }
}

/// Reconstruct `spec` once per ratio with an independent random plan and
/// report the full-spectrogram MSE of each composite.
///
/// Ratios must be strictly increasing. Entries above ratio 0.75 carry
/// visible-patch outlines, the rest render clean.
pub fn mask_ratio_sweep(
    spec: &Spectrogram,
    params: &ModelParams<f32>,
    ratios: &[f64],
    seed: u64,
) -> Result<SweepReport> {
    if ratios.is_empty() {
        return Err(Error::Config("sweep needs at least one ratio".into()));
    }
    for pair in ratios.windows(2) {
        if pair[1] <= pair[0] {
            return Err(Error::Config(format!(
                "sweep ratios must strictly increase, got {} then {}",
                pair[0], pair[1]
            )));
        }
    }
    let n = params.cfg.grid()?.n();
    let mut entries = Vec::with_capacity(ratios.len());
    for (i, &ratio) in ratios.iter().enumerate() {
        let plan = random_mask_plan(n, ratio, derive_seed(seed, stream::SWEEP, i as u64))?;
        let show = ratio > SWEEP_OUTLINE_ABOVE;
        let triptych = render_reconstruction(spec, params, &plan, show)?;
        let composed = composite_reconstruction(spec, params, &plan, false)?;
        let mse = full_spectrogram_mse(spec, &composed)?;
        entries.push(SweepEntry { ratio, mse, triptych });
    }
    Ok(SweepReport { entries })
}

/// Spectrogram beside the attention heatmap of one reference patch.
#[derive(Debug, Clone)]
pub struct AttentionImage {
    pub ref_f: usize,
    pub ref_t: usize,
    pub spectrogram: GrayImage,
    pub heatmap: GrayImage,
    /// The reference patch, outlined on both panels.
    pub outline: PixRect,
}

impl AttentionImage {
    /// Quantize into one `[spectrogram | gutter | heatmap]` image, total
    /// width `2*T + GUTTER`.
    pub fn compose(&self) -> Result<Composite> {
        let outlines = [self.outline];
        compose_panels(&self.panels(&outlines))
    }

    fn panels<'a>(&'a self, outlines: &'a [PixRect]) -> [Panel<'a>; 2] {
        [
            Panel { name: "input", image: &self.spectrogram, invert: false, outlines },
            Panel { name: "attention", image: &self.heatmap, invert: false, outlines },
        ]
    }

    /// Emit `<base>.ppm` / `<base>.meta`.
    pub fn write(&self, base: &Path) -> Result<()> {
        let outlines = [self.outline];
        write_panels(base, &self.panels(&outlines))
    }
}

/// Last-block attention maps for a list of reference patches `(f, t)`.
///
/// Each heatmap holds the head-averaged softmax row of its reference,
/// replicated patchwise up to the spectrogram's size.
pub fn render_attention(
    spec: &Spectrogram,
    params: &ModelParams<f32>,
    refs: &[(usize, usize)],
) -> Result<Vec<AttentionImage>> {
    let patch = &params.cfg.patch;
    let mut images = Vec::with_capacity(refs.len());
    for &(ref_f, ref_t) in refs {
        let attn = attention_last_layer(spec, params, ref_f, ref_t)?;
        let mut up = vec![0.0f32; spec.n_mels * spec.n_frames];
        for mel in 0..spec.n_mels {
            for frame in 0..spec.n_frames {
                up[mel * spec.n_frames + frame] = attn.get(mel / patch.p_f, frame / patch.p_t);
            }
        }
        let heat_spec = Spectrogram::new(up, spec.n_mels, spec.n_frames)?;
        images.push(AttentionImage {
            ref_f,
            ref_t,
            spectrogram: GrayImage::from_spectrogram(spec),
            heatmap: GrayImage::from_spectrogram(&heat_spec),
            outline: cell_rect(ref_f, ref_t, patch, spec.n_mels),
        });
    }
    Ok(images)
}

// ---------------------------------------------------------------------------
// Pixel emission
// ---------------------------------------------------------------------------

/// One named panel of a composite figure.
pub struct Panel<'a> {
    pub name: &'a str,
    pub image: &'a GrayImage,
    /// Inverted panels map larger values to darker pixels.
    pub invert: bool,
    pub outlines: &'a [PixRect],
}

/// A composed figure: grayscale pixels row-major, plus the per-panel
/// mapping description that lands in the `.meta` sidecar.
#[derive(Debug, Clone, PartialEq)]
pub struct Composite {
    pub pixels: Vec<u8>,
    pub height: usize,
    pub width: usize,
    pub meta: String,
}

/// Affine map to [0, 255]; a flat panel maps to 0 (or 255 inverted).
fn quantize(image: &GrayImage, invert: bool) -> (Vec<u8>, f32, f32) {
    let min = image.data.iter().cloned().fold(f32::INFINITY, f32::min);
    let max = image.data.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let scale = if max > min { 255.0 / (max - min) } else { 0.0 };
    let pix = image
        .data
        .iter()
        .map(|&v| {
            let q = ((v - min) * scale).round() as u8;
            if invert {
                255 - q
            } else {
                q
            }
        })
        .collect();
    (pix, min, max)
}

fn draw_rect(pix: &mut [u8], width: usize, rect: &PixRect) {
    let bottom = rect.top + rect.height - 1;
    let right = rect.left + rect.width - 1;
    for c in rect.left..=right {
        pix[rect.top * width + c] = 255;
        pix[bottom * width + c] = 255;
    }
    for r in rect.top..=bottom {
        pix[r * width + rect.left] = 255;
        pix[r * width + right] = 255;
    }
}

/// Quantize panels and lay them out left to right with gutters.
pub fn compose_panels(panels: &[Panel]) -> Result<Composite> {
    let height = panels[0].image.height;
    for p in panels {
        if p.image.height != height {
            return Err(Error::Shape(format!(
                "panel '{}' height {} differs from {}",
                p.name, p.image.height, height
            )));
        }
    }
    let total_width: usize =
        panels.iter().map(|p| p.image.width).sum::<usize>() + GUTTER * (panels.len() - 1);

    let mut composite = vec![GUTTER_GRAY; height * total_width];
    let mut meta = String::new();
    meta.push_str(&format!("height {height}\nwidth {total_width}\ngutter {GUTTER}\n"));
    let mut offset = 0usize;
    for p in panels {
        let (mut pix, min, max) = quantize(p.image, p.invert);
        for rect in p.outlines {
            draw_rect(&mut pix, p.image.width, rect);
        }
        for r in 0..height {
            let dst = r * total_width + offset;
            composite[dst..dst + p.image.width]
                .copy_from_slice(&pix[r * p.image.width..(r + 1) * p.image.width]);
        }
        meta.push_str(&format!(
            "panel {} offset {} width {} min {} max {} map {}\n",
            p.name,
            offset,
            p.image.width,
            min,
            max,
            if p.invert { "inverted" } else { "linear" }
        ));
        offset += p.image.width + GUTTER;
    }
    Ok(Composite { pixels: composite, height, width: total_width, meta })
}

/// Compose panels and write P6 + `.meta`.
fn write_panels(base: &Path, panels: &[Panel]) -> Result<()> {
    let fig = compose_panels(panels)?;
    let ppm_path = base.with_extension("ppm");
    let mut ppm = Vec::with_capacity(20 + fig.pixels.len() * 3);
    ppm.extend_from_slice(format!("P6\n{} {}\n255\n", fig.width, fig.height).as_bytes());
    for g in fig.pixels {
        ppm.extend_from_slice(&[g, g, g]);
    }
    std::fs::write(&ppm_path, ppm)?;
    std::fs::write(base.with_extension("meta"), fig.meta)?;
    Ok(())
}
