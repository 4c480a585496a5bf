use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::data_forge::{quantize, write_gray_png};
use crate::error::{Error, Result};
use crate::seg_net::{SegNet, WordImportance};

/// Min-max scaling to [0, 1]; a constant field maps to all zeros.
pub fn normalize_panel(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0)).collect()
}

#[derive(Clone, Debug)]
pub struct AttentionExport {
    pub files: Vec<PathBuf>,
    /// Normalized attention panel at input resolution.
    pub panel: Vec<f64>,
    pub side: usize,
    pub words: WordImportance,
}

fn save_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })
}

/// Blue-to-red ramp.
fn heat(v: f64) -> Rgb<u8> {
    let v = v.clamp(0.0, 1.0);
    Rgb([(255.0 * v) as u8, (255.0 * (1.0 - (2.0 * v - 1.0).abs())) as u8, (255.0 * (1.0 - v)) as u8])
}

/// Writes input, ground truth (when given), attention and overlay panels,
/// plus a word-importance strip and its scores.
pub fn export_attention_maps(
    net: &SegNet<f32>,
    image: &[f32],
    report: &str,
    gt_mask: Option<&[u8]>,
    out_dir: &Path,
) -> Result<AttentionExport> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (_, words, field) = net.segment_with_attention(image, report)?;
    let side = field.width;
    let panel = normalize_panel(&field.values);
    let mut files = Vec::new();

    let input = out_dir.join("input.png");
    write_gray_png(&input, side, side, &quantize(image))?;
    files.push(input);
    if let Some(m) = gt_mask {
        let p = out_dir.join("ground_truth.png");
        let px: Vec<u8> = m.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
        write_gray_png(&p, side, side, &px)?;
        files.push(p);
    }
    let att = out_dir.join("attention.png");
    let att_px: Vec<f32> = panel.iter().map(|&v| v as f32).collect();
    write_gray_png(&att, side, side, &quantize(&att_px))?;
    files.push(att);

    let mut overlay = RgbImage::new(side as u32, side as u32);
    for (i, px) in overlay.pixels_mut().enumerate() {
        let g = image[i].clamp(0.0, 1.0) as f64 * 255.0;
        let h = heat(panel[i]);
        *px = Rgb(h.0.map(|c| (0.5 * g + 0.5 * c as f64).round() as u8));
    }
    let ov = out_dir.join("overlay.png");
    save_rgb(&overlay, &ov)?;
    files.push(ov);

    let cell = 16u32;
    let n = words.scores.len().max(1) as u32;
    let strip_vals = normalize_panel(&words.scores);
    let mut strip = RgbImage::new(cell * n, cell);
    for (x, _, px) in strip.enumerate_pixels_mut() {
        *px = heat(strip_vals.get((x / cell) as usize).copied().unwrap_or(0.0));
    }
    let sp = out_dir.join("words.png");
    save_rgb(&strip, &sp)?;
    files.push(sp);
    let tp = out_dir.join("words.tsv");
    let mut text = String::from("token\tscore\n");
    for (t, s) in words.tokens.iter().zip(&words.scores) {
        text.push_str(&format!("{t}\t{s:.6}\n"));
    }
    fs::write(&tp, text).map_err(|e| Error::io(&tp, e))?;
    files.push(tp);

    Ok(AttentionExport {
        files,
        panel,
        side,
        words,
    })
}
