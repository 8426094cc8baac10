//! Quantitative proxies for synthesized images and the report/montage writer.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffnet::Classifier;
use crate::error::{Error, Result};
use crate::image_core::{write_image, Field, ImageTensor, Shape};
use crate::tv_reg::tv_value;

pub const DEFAULT_PERCENTILE: f64 = 90.0;
pub const REPORT_TABLE: &str = "report.csv";
pub const REPORT_MONTAGE: &str = "montage.png";
pub const REPORT_HEADER: [&str; 7] =
    ["run_id", "class", "mode", "target_logit", "softmax_confidence", "tv_energy", "salient_components"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Connectivity {
    Four,
    #[default]
    Eight,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub run_id: String,
    pub class: usize,
    pub mode: String,
    pub target_logit: f64,
    pub softmax_confidence: f64,
    pub tv_energy: f64,
    pub salient_components: usize,
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// `(L_c(img), softmax(L(img))_c)`.
pub fn confidence_metrics<M: Classifier + ?Sized>(model: &M, img: &ImageTensor, class: usize) -> Result<(f64, f64)> {
    let logits = model.forward_logits(img)?;
    if class >= logits.len() {
        return Err(Error::InvalidArgument(format!("class {class} outside [0, {})", logits.len())));
    }
    Ok((logits.get(class), softmax(logits.values())[class]))
}

/// Indices of the `k` largest entries, largest first; ties by lower index.
pub fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Nearest-rank percentile: the `ceil(p/100 · n)`-th smallest value.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Channel-summed `|saliency|` per pixel, row-major.
pub fn saliency_magnitude(saliency: &Field) -> Vec<f64> {
    let s = saliency.shape();
    (0..s.height)
        .flat_map(|r| (0..s.width).map(move |c| (r, c)))
        .map(|(r, c)| (0..s.channels).map(|ch| saliency.get(r, c, ch).abs()).sum())
        .collect()
}

/// Connected components of the pixels whose channel-summed `|saliency|` is
/// strictly above the given percentile of that same per-pixel magnitude.
pub fn salient_components(saliency: &Field, percentile_p: f64, connectivity: Connectivity) -> Result<usize> {
    if !(percentile_p > 0.0 && percentile_p < 100.0) {
        return Err(Error::InvalidArgument(format!("percentile must lie in (0, 100), got {percentile_p}")));
    }
    let mag = saliency_magnitude(saliency);
    let threshold = percentile(&mag, percentile_p);
    let on: Vec<bool> = mag.iter().map(|&m| m > threshold).collect();
    let s = saliency.shape();
    Ok(count_components(&on, s.height, s.width, connectivity))
}

/// Union-find labelling of a binary row-major grid.
pub fn count_components(on: &[bool], height: usize, width: usize, connectivity: Connectivity) -> usize {
    assert_eq!(on.len(), height * width, "grid size");
    let mut parent: Vec<usize> = (0..on.len()).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    // Earlier neighbours in raster order suffice: left, up, and the two
    // upper diagonals for 8-connectivity.
    let back: &[(isize, isize)] = match connectivity {
        Connectivity::Four => &[(0, -1), (-1, 0)],
        Connectivity::Eight => &[(0, -1), (-1, -1), (-1, 0), (-1, 1)],
    };
    for r in 0..height {
        for c in 0..width {
            let i = r * width + c;
            if !on[i] {
                continue;
            }
            for &(dr, dc) in back {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if nr < 0 || nc < 0 || nc >= width as isize {
                    continue;
                }
                let j = nr as usize * width + nc as usize;
                if on[j] {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    if a != b {
                        parent[a.max(b)] = a.min(b);
                    }
                }
            }
        }
    }
    (0..on.len()).filter(|&i| on[i] && find(&mut parent, i) == i).count()
}

/// All metrics for a final image; saliency is the input gradient of the
/// target logit at that image.
pub fn measure<M: Classifier + ?Sized>(
    model: &M,
    img: &ImageTensor,
    class: usize,
    run_id: &str,
    mode: &str,
    percentile_p: f64,
) -> Result<RunMetrics> {
    let (logit, conf) = confidence_metrics(model, img, class)?;
    let (_, grad) = model.input_gradient(img, class)?;
    Ok(RunMetrics {
        run_id: run_id.to_string(),
        class,
        mode: mode.to_string(),
        target_logit: logit,
        softmax_confidence: conf,
        tv_energy: tv_value(img.shape(), img.data()),
        salient_components: salient_components(&grad, percentile_p, Connectivity::Eight)?,
    })
}

/// Writes the table and the montage into `dir`. Rows (and montage cells,
/// left to right, top to bottom) are ordered by class, then mode, then run
/// id. Returns both paths.
pub fn emit_report(runs: &[(RunMetrics, ImageTensor)], dir: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
    if runs.is_empty() {
        return Err(Error::InvalidArgument("report needs at least one run".into()));
    }
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut order: Vec<&(RunMetrics, ImageTensor)> = runs.iter().collect();
    order.sort_by(|(a, _), (b, _)| (a.class, &a.mode, &a.run_id).cmp(&(b.class, &b.mode, &b.run_id)));

    let table = dir.join(REPORT_TABLE);
    let csv_err = |e: csv::Error| Error::corrupt(&table, e.to_string());
    let mut w = csv::Writer::from_path(&table).map_err(csv_err)?;
    w.write_record(REPORT_HEADER).map_err(csv_err)?;
    for (m, _) in &order {
        w.write_record([
            m.run_id.clone(),
            m.class.to_string(),
            m.mode.clone(),
            m.target_logit.to_string(),
            m.softmax_confidence.to_string(),
            m.tv_energy.to_string(),
            m.salient_components.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&table, e))?;

    let images: Vec<&ImageTensor> = order.iter().map(|(_, img)| img).collect();
    let montage_path = dir.join(REPORT_MONTAGE);
    write_image(&montage(&images)?, &montage_path)?;
    Ok((table, montage_path))
}

/// Grid with `ceil(sqrt(n))` columns and a 2-pixel black gutter. Images
/// must share height and width; grayscale cells are promoted when mixed
/// with colour ones.
pub fn montage(images: &[&ImageTensor]) -> Result<ImageTensor> {
    const GAP: usize = 2;
    let first = images.first().ok_or_else(|| Error::InvalidArgument("empty montage".into()))?;
    let (h, w) = (first.height(), first.width());
    let channels = images.iter().map(|i| i.channels()).max().unwrap_or(1);
    for img in images {
        if img.height() != h || img.width() != w {
            return Err(Error::shape(first.shape(), img.shape()));
        }
    }
    let n = images.len();
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let shape = Shape::new(rows * h + (rows - 1) * GAP, cols * w + (cols - 1) * GAP, channels);
    let mut out = ImageTensor::filled(shape, 0.0)?;
    for (k, img) in images.iter().enumerate() {
        let (oy, ox) = ((k / cols) * (h + GAP), (k % cols) * (w + GAP));
        for r in 0..h {
            for c in 0..w {
                for ch in 0..channels {
                    let v = img.get(r, c, ch.min(img.channels() - 1));
                    out.set(oy + r, ox + c, ch, v);
                }
            }
        }
    }
    Ok(out)
}

/// Median of a non-empty sample (mean of the middle pair for even sizes).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}
