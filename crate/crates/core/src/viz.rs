//! Attention heatmaps as CSV and purple-scale SVG.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{ActivationCache, Matrix};
use crate::patching::PatchRun;
use crate::task::Vocabulary;

/// Token strings for axis labels; unknown ids print as `#id`.
pub fn token_labels(tokens: &[u32], vocab: &Vocabulary) -> Vec<String> {
    tokens
        .iter()
        .map(|&id| match vocab.token(id) {
            Ok(t) => t.to_string(),
            Err(_) => format!("#{id}"),
        })
        .collect()
}

/// Rows are destination positions, columns source positions.
pub fn attention_csv(attn: &Matrix, labels: &[String]) -> String {
    let mut out = String::from("dest\\src");
    for (j, l) in labels.iter().enumerate().take(attn.cols) {
        let _ = write!(out, ",{j}:{l}");
    }
    out.push('\n');
    for i in 0..attn.rows {
        let _ = write!(out, "{i}:{}", labels.get(i).map_or("", String::as_str));
        for x in attn.row(i) {
            let _ = write!(out, ",{x}");
        }
        out.push('\n');
    }
    out
}

/// Parses [`attention_csv`] output back into a matrix.
pub fn parse_attention_csv(text: &str) -> Result<Matrix> {
    let rows: Vec<Vec<f32>> = text
        .lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|line| {
            line.split(',')
                .skip(1)
                .map(|v| {
                    v.parse::<f32>()
                        .map_err(|_| Error::InvalidInput(format!("bad value `{v}`")))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::InvalidInput("ragged attention CSV".into()));
    }
    Ok(Matrix::from_vec(rows.len(), cols, rows.concat()))
}

fn purple(x: f32) -> String {
    let t = x.clamp(0.0, 1.0);
    let lerp = |a: f32, b: f32| (a + (b - a) * t).round() as u8;
    format!("#{:02x}{:02x}{:02x}", lerp(255.0, 63.0), lerp(255.0, 0.0), lerp(255.0, 125.0))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

const CELL: f32 = 12.0;
const MARGIN: f32 = 90.0;
const GAP: f32 = 40.0;

/// One SVG with a heatmap per panel, laid out in a grid of `columns`.
pub fn attention_svg(panels: &[(String, &Matrix)], labels: &[String], columns: usize) -> String {
    let columns = columns.max(1);
    let n = panels.first().map_or(0, |p| p.1.cols) as f32;
    let side = n * CELL;
    let pw = MARGIN + side + GAP;
    let ph = MARGIN + side + GAP;
    let rows = panels.len().div_ceil(columns);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" font-family="monospace" font-size="8">"#,
        pw * columns as f32,
        ph * rows as f32
    );
    for (k, (title, m)) in panels.iter().enumerate() {
        let ox = (k % columns) as f32 * pw + MARGIN;
        let oy = (k / columns) as f32 * ph + MARGIN;
        let _ = writeln!(
            svg,
            r#"<text x="{ox}" y="{}" font-size="11">{}</text>"#,
            oy - 60.0,
            escape(title)
        );
        for (j, l) in labels.iter().enumerate().take(m.cols) {
            let x = ox + j as f32 * CELL + CELL * 0.7;
            let _ = writeln!(
                svg,
                r#"<text x="{x}" y="{}" transform="rotate(-90 {x} {})">{}</text>"#,
                oy - 3.0,
                oy - 3.0,
                escape(l)
            );
        }
        for i in 0..m.rows {
            let y = oy + i as f32 * CELL;
            let _ = writeln!(
                svg,
                r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
                ox - 3.0,
                y + CELL * 0.75,
                escape(labels.get(i).map_or("", String::as_str))
            );
            for (j, &a) in m.row(i).iter().enumerate() {
                let _ = writeln!(
                    svg,
                    r#"<rect x="{}" y="{y}" width="{CELL}" height="{CELL}" fill="{}"><title>{i}→{j}: {a:.4}</title></rect>"#,
                    ox + j as f32 * CELL,
                    purple(a)
                );
            }
        }
    }
    svg.push_str("</svg>\n");
    svg
}

fn write(path: &Path, body: &str) -> Result<PathBuf> {
    fs::write(path, body).map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

/// Writes `{prefix}_L{l}H{h}.csv` per head plus `{prefix}.svg`.
pub fn write_heatmaps(
    cache: &ActivationCache,
    vocab: &Vocabulary,
    dir: &Path,
    prefix: &str,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let labels = token_labels(&cache.tokens, vocab);
    let mut written = Vec::new();
    let mut panels = Vec::new();
    for (l, layer) in cache.heads.iter().enumerate() {
        for (h, head) in layer.iter().enumerate() {
            let path = dir.join(format!("{prefix}_L{l}H{h}.csv"));
            written.push(write(&path, &attention_csv(&head.attn, &labels))?);
            panels.push((format!("layer {l} head {h}"), &head.attn));
        }
    }
    let columns = cache.heads.first().map_or(1, Vec::len);
    let svg = dir.join(format!("{prefix}.svg"));
    written.push(write(&svg, &attention_svg(&panels, &labels, columns))?);
    Ok(written)
}

/// Clean and patched heatmaps of every head, side by side.
pub fn write_patch_heatmaps(
    run: &PatchRun,
    vocab: &Vocabulary,
    dir: &Path,
    prefix: &str,
) -> Result<Vec<PathBuf>> {
    let mut written = write_heatmaps(&run.clean, vocab, dir, &format!("{prefix}_clean"))?;
    written.extend(write_heatmaps(&run.patched, vocab, dir, &format!("{prefix}_patched"))?);
    let labels = token_labels(&run.clean.tokens, vocab);
    let mut panels = Vec::new();
    for (l, (cl, pl)) in run.clean.heads.iter().zip(&run.patched.heads).enumerate() {
        for (h, (c, p)) in cl.iter().zip(pl).enumerate() {
            panels.push((format!("clean L{l}H{h}"), &c.attn));
            panels.push((format!("patched L{l}H{h}"), &p.attn));
        }
    }
    let svg = dir.join(format!("{prefix}_side_by_side.svg"));
    written.push(write(&svg, &attention_svg(&panels, &labels, 2))?);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, init_params, ModelConfig};

    #[test]
    fn single_token_heatmap_is_one() {
        let p = init_params(&ModelConfig::new(8, 12, 4), 0).unwrap();
        let cache = forward(&p, &[7]).unwrap();
        let labels = token_labels(&cache.tokens, &Vocabulary::new(6));
        let csv = attention_csv(&cache.heads[0][0].attn, &labels);
        let m = parse_attention_csv(&csv).unwrap();
        assert_eq!((m.rows, m.cols), (1, 1));
        assert_eq!(m.data[0], 1.0);
    }

    #[test]
    fn csv_round_trips_cache_values_exactly() {
        let p = init_params(&ModelConfig::new(16, 12, 48), 2).unwrap();
        let tokens: Vec<u32> = (0..20).map(|i| (i * 7 % 12) as u32).collect();
        let cache = forward(&p, &tokens).unwrap();
        let labels = token_labels(&tokens, &Vocabulary::new(6));
        for layer in &cache.heads {
            for h in layer {
                let back = parse_attention_csv(&attention_csv(&h.attn, &labels)).unwrap();
                assert_eq!(back, h.attn);
            }
        }
    }

    #[test]
    fn svg_has_one_cell_per_entry() {
        let m = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.25, 0.75]);
        let labels = vec!["STORE".to_string(), "R0".to_string()];
        let svg = attention_svg(&[("t".into(), &m)], &labels, 1);
        assert_eq!(svg.matches("<rect").count(), 4);
        assert!(svg.contains(&purple(1.0)));
        assert_eq!(purple(0.0), "#ffffff");
    }
}
