//! Confusion-matrix segmentation metrics and an inference-latency benchmark.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SegNet;
use crate::nn::Mode;
use crate::tensor::{Real, Tensor};

/// `K×K` pixel counts; rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            k: num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    /// Count of pixels with ground truth `gt` predicted as `pred`.
    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    /// Builds a matrix from row-major counts.
    pub fn from_counts(num_classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != num_classes * num_classes {
            return Err(Error::Shape(format!(
                "{} counts for a {num_classes}×{num_classes} matrix",
                counts.len()
            )));
        }
        Ok(ConfusionMatrix {
            k: num_classes,
            counts,
        })
    }

    /// Number of scored pixels.
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one prediction/label pair. Pixels whose label is `ignore_id` are
    /// skipped; any other out-of-range value is an error and leaves the
    /// matrix unchanged.
    pub fn update(&mut self, pred: &[u8], gt: &[u8], ignore_id: u8) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Shape(format!(
                "prediction has {} pixels, ground truth {}",
                pred.len(),
                gt.len()
            )));
        }
        let k = self.k;
        if let Some((i, (&p, &g))) = pred
            .iter()
            .zip(gt)
            .enumerate()
            .find(|(_, (&p, &g))| g != ignore_id && (g as usize >= k || p as usize >= k))
        {
            return Err(Error::InvalidArgument(format!(
                "pixel {i}: class ids (gt {g}, pred {p}) outside 0..{k}"
            )));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if g != ignore_id {
                self.counts[g as usize * k + p as usize] += 1;
            }
        }
        Ok(())
    }

    /// Element-wise sum, for combining partial evaluations.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::Shape(format!(
                "cannot merge {}-class and {}-class matrices",
                self.k, other.k
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Trace over total; zero when nothing was scored.
    pub fn pixel_accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        (0..self.k).map(|c| self.get(c, c)).sum::<u64>() as f64 / total as f64
    }

    /// Per-class IoU `TP / (TP + FP + FN)`. A class with an empty union is
    /// undefined and left out of the mean.
    pub fn iou(&self, class_names: &[String]) -> IouReport {
        let per_class = (0..self.k)
            .map(|c| {
                let tp = self.get(c, c);
                let row: u64 = (0..self.k).map(|p| self.get(c, p)).sum();
                let col: u64 = (0..self.k).map(|g| self.get(g, c)).sum();
                let union = row + col - tp;
                ClassIou {
                    name: class_names
                        .get(c)
                        .cloned()
                        .unwrap_or_else(|| format!("class{c}")),
                    iou: (union > 0).then(|| tp as f64 / union as f64),
                }
            })
            .collect::<Vec<_>>();
        let defined: Vec<f64> = per_class.iter().filter_map(|c| c.iou).collect();
        let mean_iou = if defined.is_empty() {
            0.0
        } else {
            defined.iter().sum::<f64>() / defined.len() as f64
        };
        IouReport {
            per_class,
            mean_iou,
            pixel_accuracy: self.pixel_accuracy(),
            num_pixels: self.total(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub name: String,
    /// `None` when the class is absent from both prediction and ground truth.
    pub iou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    pub per_class: Vec<ClassIou>,
    pub mean_iou: f64,
    pub pixel_accuracy: f64,
    pub num_pixels: u64,
}

impl IouReport {
    /// `{per_class: {name: iou|null}, mean_iou, pixel_accuracy, num_pixels}`.
    pub fn to_json(&self) -> serde_json::Value {
        let per_class: serde_json::Map<String, serde_json::Value> = self
            .per_class
            .iter()
            .map(|c| {
                (
                    c.name.clone(),
                    c.iou.map_or(serde_json::Value::Null, Into::into),
                )
            })
            .collect();
        serde_json::json!({
            "per_class": per_class,
            "mean_iou": self.mean_iou,
            "pixel_accuracy": self.pixel_accuracy,
            "num_pixels": self.num_pixels,
        })
    }

    /// Header for [`IouReport::table_row`].
    pub fn table_header(&self, first: &str) -> String {
        let mut cols = vec![first.to_string()];
        cols.extend(self.per_class.iter().map(|c| capitalize(&c.name)));
        cols.push("Mean".into());
        cols.join(" | ")
    }

    /// `label | 67.67% | … | mean%`; undefined classes print as `n/a`.
    pub fn table_row(&self, label: &str) -> String {
        let mut cols = vec![label.to_string()];
        cols.extend(
            self.per_class
                .iter()
                .map(|c| c.iou.map_or_else(|| "n/a".to_string(), percent)),
        );
        cols.push(percent(self.mean_iou));
        cols.join(" | ")
    }
}

fn percent(v: f64) -> String {
    format!("{:.2}%", 100.0 * v)
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    c.next()
        .map(|f| f.to_uppercase().chain(c).collect())
        .unwrap_or_default()
}

/// Per-pixel argmax over the class axis, `N×H×W` flattened.
pub fn argmax_labels<T: Real>(logits: &Tensor<T>) -> Result<Vec<u8>> {
    let (n, k, h, w) = logits.try_dims4()?;
    if k > 256 {
        return Err(Error::Shape(format!("{k} classes do not fit u8 labels")));
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(n * hw);
    for b in 0..n {
        let item = logits.item(b);
        for i in 0..hw {
            let mut best = 0;
            for c in 1..k {
                if item[c * hw + i] > item[best * hw + i] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
}

/// Forward-pass timing of one model at one input shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub latency_ms: LatencyStats,
    pub fps: f64,
    pub device: String,
    pub input_shape: Vec<usize>,
    pub runs: usize,
    pub warmup: usize,
}

/// Nearest-rank percentile of sorted data.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Summarizes per-run latencies in milliseconds.
pub fn latency_stats(samples_ms: &[f64]) -> Result<LatencyStats> {
    if samples_ms.is_empty() {
        return Err(Error::InvalidArgument("no timing samples".into()));
    }
    let mut sorted = samples_ms.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(LatencyStats {
        mean: sorted.iter().sum::<f64>() / sorted.len() as f64,
        p50: percentile(&sorted, 50.0),
        p95: percentile(&sorted, 95.0),
    })
}

/// Host description recorded with benchmark results.
pub fn device_description() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|v| v.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".into());
    format!("cpu: {cpu} ({}, single thread)", std::env::consts::ARCH)
}

/// Times `runs` evaluation-mode forward passes on a constant `input_shape`
/// batch after `warmup` untimed ones. Only the forward pass is timed.
pub fn benchmark<T: Real>(
    model: &mut SegNet<T>,
    input_shape: [usize; 4],
    warmup: usize,
    runs: usize,
) -> Result<BenchReport> {
    if runs == 0 {
        return Err(Error::InvalidArgument(
            "benchmark needs at least one run".into(),
        ));
    }
    let x = Tensor::full(&input_shape, T::lit(0.1));
    let run = |m: &mut SegNet<T>| {
        m.forward(&x, Mode::Eval)
            .map_err(|e| Error::Shape(format!("benchmark input {input_shape:?}: {e}")))
    };
    for _ in 0..warmup {
        run(model)?;
    }
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t0 = Instant::now();
        let y = run(model)?;
        times.push(t0.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(y);
    }
    let latency_ms = latency_stats(&times)?;
    Ok(BenchReport {
        fps: 1e3 / latency_ms.mean,
        latency_ms,
        device: device_description(),
        input_shape: input_shape.to_vec(),
        runs,
        warmup,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names() -> Vec<String> {
        ["track", "field", "others"].map(String::from).to_vec()
    }

    #[test]
    fn perfect_prediction() {
        let mut cm = ConfusionMatrix::new(3);
        let gt = [0, 1, 2, 2, 1, 0];
        cm.update(&gt, &gt, 255).unwrap();
        let r = cm.iou(&names());
        assert!(r.per_class.iter().all(|c| c.iou == Some(1.0)));
        assert_eq!((r.mean_iou, r.pixel_accuracy), (1.0, 1.0));
    }

    #[test]
    fn ignored_pixels_do_not_count() {
        let mut cm = ConfusionMatrix::new(3);
        cm.update(&[0, 1, 2], &[255, 255, 255], 255).unwrap();
        assert_eq!(cm, ConfusionMatrix::new(3));
    }

    #[test]
    fn out_of_range_rejected_atomically() {
        let mut cm = ConfusionMatrix::new(3);
        assert!(cm.update(&[0, 1], &[0, 3], 255).is_err());
        assert!(cm.update(&[0, 5], &[0, 1], 255).is_err());
        assert_eq!(cm.total(), 0);
    }

    #[test]
    fn disjoint_class_and_undefined_class() {
        let mut cm = ConfusionMatrix::new(3);
        cm.update(&[1, 1, 0], &[0, 0, 0], 255).unwrap();
        let r = cm.iou(&names());
        assert_eq!(r.per_class[0].iou, Some(1.0 / 3.0));
        assert_eq!(r.per_class[1].iou, Some(0.0));
        assert_eq!(r.per_class[2].iou, None);
        assert!((r.mean_iou - (1.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(r.to_json()["per_class"]["others"], serde_json::Value::Null);
    }

    #[test]
    fn table_row_formatting() {
        // rows: gt track/field/others; IoUs 6767/10000, 9906/10000, 39109/42436
        let cm = ConfusionMatrix::from_counts(3, vec![6767, 0, 1600, 0, 9906, 94, 1633, 0, 39109])
            .unwrap();
        let r = cm.iou(&names());
        assert_eq!(
            r.table_header("Network"),
            "Network | Track | Field | Others | Mean"
        );
        assert_eq!(
            r.table_row("Ours"),
            "Ours | 67.67% | 99.06% | 92.16% | 86.30%"
        );
    }

    #[test]
    fn percentiles_by_nearest_rank() {
        let s = latency_stats(&[5.0, 1.0, 3.0, 2.0, 4.0]).unwrap();
        assert_eq!((s.mean, s.p50, s.p95), (3.0, 3.0, 5.0));
        assert!(latency_stats(&[]).is_err());
    }

    #[test]
    fn argmax_picks_largest_logit() {
        let t = Tensor::from_vec(&[1, 3, 1, 2], vec![0.0f32, 5.0, 1.0, 0.0, 0.5, 9.0]).unwrap();
        assert_eq!(argmax_labels(&t).unwrap(), vec![1, 2]);
    }
}
