use serde::{Deserialize, Serialize};

/// Maximal run of one label over frames `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub label: usize,
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    pub fn iou(&self, other: &Segment) -> f64 {
        let inter = self.end.min(other.end).saturating_sub(self.start.max(other.start));
        let union = self.end.max(other.end) - self.start.min(other.start);
        inter as f64 / union as f64
    }
}

pub fn segments_from_labels(y: &[usize]) -> Vec<Segment> {
    let mut out: Vec<Segment> = Vec::new();
    for (t, &label) in y.iter().enumerate() {
        match out.last_mut() {
            Some(s) if s.label == label => s.end = t + 1,
            _ => out.push(Segment { label, start: t, end: t + 1 }),
        }
    }
    out
}

/// Frame accuracy in percent; 0 for empty input.
pub fn mof(pred: &[usize], gt: &[usize]) -> f64 {
    assert_eq!(pred.len(), gt.len(), "mof on sequences of different length");
    if gt.is_empty() {
        return 0.0;
    }
    100.0 * pred.iter().zip(gt).filter(|(p, g)| p == g).count() as f64 / gt.len() as f64
}

pub fn levenshtein(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Segmental edit score in percent.
pub fn edit_score(pred: &[usize], gt: &[usize]) -> f64 {
    let p: Vec<usize> = segments_from_labels(pred).iter().map(|s| s.label).collect();
    let g: Vec<usize> = segments_from_labels(gt).iter().map(|s| s.label).collect();
    let m = p.len().max(g.len());
    if m == 0 {
        return 100.0;
    }
    100.0 * (1.0 - levenshtein(&p, &g) as f64 / m as f64)
}

/// Whether an IoU equal to the threshold counts as a match.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IouRule {
    #[default]
    Strict,
    Inclusive,
}

impl IouRule {
    fn passes(self, iou: f64, k: f64) -> bool {
        match self {
            IouRule::Strict => iou > k,
            IouRule::Inclusive => iou >= k,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct F1Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl F1Counts {
    pub fn add(&mut self, o: F1Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }

    /// F1 in percent; 0 when there are no true positives.
    pub fn f1(&self) -> f64 {
        if self.tp == 0 {
            return 0.0;
        }
        let precision = self.tp as f64 / (self.tp + self.fp) as f64;
        let recall = self.tp as f64 / (self.tp + self.fn_) as f64;
        100.0 * 2.0 * precision * recall / (precision + recall)
    }
}

/// Greedy matching in prediction order: each predicted segment takes the
/// unmatched same-label ground-truth segment of highest IoU (earliest on ties).
pub fn f1_counts(pred: &[usize], gt: &[usize], k: f64, rule: IouRule) -> F1Counts {
    let ps = segments_from_labels(pred);
    let gs = segments_from_labels(gt);
    let mut used = vec![false; gs.len()];
    let mut tp = 0;
    for p in &ps {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gs.iter().enumerate() {
            if used[j] || g.label != p.label {
                continue;
            }
            let iou = p.iou(g);
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        if let Some((j, iou)) = best {
            if rule.passes(iou, k) {
                used[j] = true;
                tp += 1;
            }
        }
    }
    F1Counts {
        tp,
        fp: ps.len() - tp,
        fn_: gs.len() - tp,
    }
}

pub fn f1_at_k(pred: &[usize], gt: &[usize], k: f64) -> f64 {
    f1_counts(pred, gt, k, IouRule::Strict).f1()
}
