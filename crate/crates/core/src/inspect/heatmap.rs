use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Paths written by [`export_heatmap`] and the affine map used for pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapFiles {
    pub csv: PathBuf,
    pub pgm: PathBuf,
    pub sidecar: PathBuf,
    pub min: f64,
    pub max: f64,
}

/// Formats like C's `%.17g`, which round-trips every finite `f64`.
pub fn format_g17(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return if v.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{v:.16e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent marker");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..17).contains(&exp) {
        let fixed = format!("{:.*}", (16 - exp) as usize, v);
        trim_fraction(&fixed).to_string()
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_fraction(mantissa), exp.abs())
    }
}

fn trim_fraction(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn with_suffix(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Writes `<stem>.csv` (every entry at full precision), `<stem>.pgm`
/// (binary 8-bit greyscale, per-panel affine map min → 0, max → 255) and
/// `<stem>.txt` (one line describing the map). `clip` keeps only the
/// top-left `clip × clip` block. A constant matrix maps to all zeros.
pub fn export_heatmap(m: &Matrix, stem: &Path, clip: Option<usize>) -> Result<HeatmapFiles> {
    if m.is_empty() {
        return Err(Error::Shape("cannot export an empty matrix".into()));
    }
    let view = match clip {
        Some(0) => return Err(Error::InvalidParameter("clip must be positive".into())),
        Some(c) => m.rows_range(0..c.min(m.rows())).columns(0..c.min(m.cols())),
        None => m.clone(),
    };
    let (rows, cols) = view.shape();

    let csv = with_suffix(stem, "csv");
    let mut text = String::with_capacity(rows * cols * 24);
    for i in 0..rows {
        let line: Vec<String> = view.row(i).iter().map(|&v| format_g17(v)).collect();
        text.push_str(&line.join(","));
        text.push('\n');
    }
    fs::write(&csv, text)?;

    let min = view.as_slice().iter().copied().fold(f64::INFINITY, f64::min);
    let max = view.as_slice().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let pixels: Vec<u8> = view
        .as_slice()
        .iter()
        .map(|&v| {
            if span > 0.0 && span.is_finite() {
                (255.0 * (v - min) / span).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        })
        .collect();
    let pgm = with_suffix(stem, "pgm");
    let mut file = fs::File::create(&pgm)?;
    write!(file, "P5\n{cols} {rows}\n255\n")?;
    file.write_all(&pixels)?;

    let sidecar = with_suffix(stem, "txt");
    let clip_note = clip.map_or("none".to_string(), |c| c.to_string());
    fs::write(
        &sidecar,
        format!(
            "pixel = round(255 * (value - min) / (max - min)); min={} max={} rows={rows} cols={cols} clip={clip_note}\n",
            format_g17(min),
            format_g17(max)
        ),
    )?;
    Ok(HeatmapFiles {
        csv,
        pgm,
        sidecar,
        min,
        max,
    })
}
