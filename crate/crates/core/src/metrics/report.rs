//! Aggregated evaluation results and their CSV / text renderings.

use std::fmt::Write as _;

use crate::error::Result;
use crate::geometry::SparseOccupancy;
use crate::metrics::{class_counts, miou_from_counts};

/// Seconds between consecutive frames, used for column labels.
pub const FRAME_SECONDS: f64 = 0.5;

/// Pools per-class counts and per-sample planning results across samples.
#[derive(Debug, Clone)]
pub struct EvalAccumulator {
    n_classes: usize,
    /// `[horizon][class] -> (intersection, union)`; horizon 0 is the current frame.
    counts: Vec<Vec<(usize, usize)>>,
    /// `[horizon] -> (intersection, union)` ignoring labels.
    binary: Vec<(usize, usize)>,
    l2: Vec<Vec<f64>>,
    baseline_l2: Vec<Vec<f64>>,
    collisions: Vec<Vec<bool>>,
    runtime_ms: Vec<f64>,
}

impl EvalAccumulator {
    pub fn new(n_classes: usize, future: usize) -> Self {
        Self {
            n_classes,
            counts: vec![vec![(0, 0); n_classes]; future + 1],
            binary: vec![(0, 0); future + 1],
            l2: vec![Vec::new(); future],
            baseline_l2: vec![Vec::new(); future],
            collisions: vec![Vec::new(); future],
            runtime_ms: Vec::new(),
        }
    }

    pub fn add_occupancy(&mut self, horizon: usize, pred: &SparseOccupancy, gt: &SparseOccupancy) {
        for (acc, c) in self.counts[horizon].iter_mut().zip(class_counts(pred, gt, self.n_classes)) {
            acc.0 += c.0;
            acc.1 += c.1;
        }
        let inter = pred.iter().filter(|(c, _)| gt.contains(c)).count();
        self.binary[horizon].0 += inter;
        self.binary[horizon].1 += pred.len() + gt.len() - inter;
    }

    pub fn add_plan(&mut self, l2: &[f64], baseline_l2: &[f64], collisions: &[bool]) {
        for (h, &v) in l2.iter().enumerate() {
            self.l2[h].push(v);
        }
        for (h, &v) in baseline_l2.iter().enumerate() {
            self.baseline_l2[h].push(v);
        }
        for (h, &v) in collisions.iter().enumerate() {
            self.collisions[h].push(v);
        }
    }

    pub fn add_runtime(&mut self, ms: f64) {
        self.runtime_ms.push(ms);
    }

    pub fn finish(&self) -> Result<EvalReport> {
        let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        let miou = self
            .counts
            .iter()
            .map(|c| miou_from_counts(c).unwrap_or(0.0))
            .collect();
        let iou = self
            .binary
            .iter()
            .map(|&(i, u)| if u == 0 { 1.0 } else { i as f64 / u as f64 })
            .collect();
        Ok(EvalReport {
            miou,
            iou,
            l2: self.l2.iter().map(|v| mean(v)).collect(),
            baseline_l2: self.baseline_l2.iter().map(|v| mean(v)).collect(),
            collision: self
                .collisions
                .iter()
                .map(|v| if v.is_empty() { 0.0 } else { v.iter().filter(|&&c| c).count() as f64 / v.len() as f64 })
                .collect(),
            samples: self.runtime_ms.len(),
            mean_forward_ms: mean(&self.runtime_ms),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Index 0 is the current frame, `t` is horizon `t`.
    pub miou: Vec<f64>,
    pub iou: Vec<f64>,
    /// Index `t − 1` is horizon `t`.
    pub l2: Vec<f64>,
    pub baseline_l2: Vec<f64>,
    pub collision: Vec<f64>,
    pub samples: usize,
    pub mean_forward_ms: f64,
}

fn avg(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

impl EvalReport {
    pub fn future(&self) -> usize {
        self.l2.len()
    }

    /// Mean mIoU over future horizons.
    pub fn avg_future_miou(&self) -> f64 {
        avg(&self.miou[1..])
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("horizon,seconds,miou,iou,l2,baseline_l2,collision_rate\n");
        let _ = writeln!(s, "0,0.0,{:?},{:?},,,", self.miou[0], self.iou[0]);
        for t in 1..=self.future() {
            let _ = writeln!(
                s,
                "{t},{:?},{:?},{:?},{:?},{:?},{:?}",
                t as f64 * FRAME_SECONDS,
                self.miou[t],
                self.iou[t],
                self.l2[t - 1],
                self.baseline_l2[t - 1],
                self.collision[t - 1]
            );
        }
        let _ = writeln!(
            s,
            "avg,,{:?},{:?},{:?},{:?},{:?}",
            self.avg_future_miou(),
            avg(&self.iou[1..]),
            avg(&self.l2),
            avg(&self.baseline_l2),
            avg(&self.collision)
        );
        s
    }

    pub fn to_table(&self) -> String {
        let f = self.future();
        let mut s = String::new();
        let mut header = format!("{:<16}", "");
        for t in 1..=f {
            header += &format!("{:>9}", format!("{:.1}s", t as f64 * FRAME_SECONDS));
        }
        header += &format!("{:>9}", "Avg.");
        let _ = writeln!(s, "{header}");
        let row = |name: &str, vals: &[f64], scale: f64| {
            let mut r = format!("{name:<16}");
            for v in vals {
                r += &format!("{:>9.2}", v * scale);
            }
            r += &format!("{:>9.2}", avg(vals) * scale);
            r
        };
        let _ = writeln!(s, "{}", row("mIoU (%)", &self.miou[1..], 100.0));
        let _ = writeln!(s, "{}", row("IoU (%)", &self.iou[1..], 100.0));
        let _ = writeln!(s, "{}", row("L2 (m)", &self.l2, 1.0));
        let _ = writeln!(s, "{}", row("L2 const-vel (m)", &self.baseline_l2, 1.0));
        let _ = writeln!(s, "{}", row("Collision (%)", &self.collision, 100.0));
        let _ = writeln!(
            s,
            "current frame: mIoU {:.2}%  IoU {:.2}%  ({} samples, {:.1} ms/forward)",
            self.miou[0] * 100.0,
            self.iou[0] * 100.0,
            self.samples,
            self.mean_forward_ms
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::GridSpec;

    #[test]
    fn gt_as_prediction_scores_one() {
        let g = GridSpec::<f64>::new([0.0; 3], 1.0, [4, 4, 1]).unwrap();
        let occ = SparseOccupancy::from_cells([([0, 0, 0], 2), ([1, 1, 0], 3)], &g, 6).unwrap();
        let mut acc = EvalAccumulator::new(6, 2);
        for h in 0..3 {
            acc.add_occupancy(h, &occ, &occ);
        }
        acc.add_plan(&[0.0, 0.0], &[0.1, 0.2], &[false, false]);
        acc.add_runtime(1.0);
        let r = acc.finish().unwrap();
        assert_eq!(r.miou, vec![1.0; 3]);
        assert_eq!(r.iou, vec![1.0; 3]);
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 5);
        assert!(r.to_table().contains("mIoU"));
    }
}
