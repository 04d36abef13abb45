//! Count-accumulated mIoU and FB-IoU.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::autodiff::IGNORE_LABEL;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Running intersection and union pixel counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Counts {
    pub intersection: u64,
    pub union: u64,
}

impl Counts {
    fn add(&mut self, o: Counts) {
        self.intersection += o.intersection;
        self.union += o.union;
    }

    pub fn iou(&self) -> Option<f64> {
        (self.union > 0).then(|| self.intersection as f64 / self.union as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EvalAccumulator {
    ignore_enabled: bool,
    classes: BTreeMap<u32, Counts>,
    background: Counts,
    foreground: Counts,
    episodes: u64,
}

impl EvalAccumulator {
    /// With `ignore_enabled`, ground-truth pixels labelled 255 are excluded
    /// from every count; otherwise they are ordinary background.
    pub fn new(ignore_enabled: bool) -> Self {
        Self {
            ignore_enabled,
            ..Self::default()
        }
    }

    pub fn ignore_enabled(&self) -> bool {
        self.ignore_enabled
    }

    pub fn episodes(&self) -> u64 {
        self.episodes
    }

    pub fn class_counts(&self) -> &BTreeMap<u32, Counts> {
        &self.classes
    }

    pub fn accumulate<T: Real>(&mut self, pred: &Tensor<T>, gt: &Tensor<T>, class_id: u32) -> Result<()> {
        pred.expect_same_dims(gt)?;
        let mut fg = Counts::default();
        let mut bg = Counts::default();
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            let p = p.as_f64();
            let g = g.as_f64();
            if p != 0.0 && p != 1.0 {
                return Err(Error::input(format!("prediction value {p} is not binary")));
            }
            let g = if g == IGNORE_LABEL {
                if self.ignore_enabled {
                    continue;
                }
                0.0
            } else if g == 0.0 || g == 1.0 {
                g
            } else {
                return Err(Error::input(format!("ground-truth value {g} is not 0, 1 or 255")));
            };
            let (pf, gf) = (p == 1.0, g == 1.0);
            fg.intersection += (pf && gf) as u64;
            fg.union += (pf || gf) as u64;
            bg.intersection += (!pf && !gf) as u64;
            bg.union += (!pf || !gf) as u64;
        }
        self.classes.entry(class_id).or_default().add(fg);
        self.foreground.add(fg);
        self.background.add(bg);
        self.episodes += 1;
        Ok(())
    }

    /// Combines two accumulators. Associative and commutative.
    pub fn merge(&mut self, other: &EvalAccumulator) -> Result<()> {
        if self.ignore_enabled != other.ignore_enabled {
            return Err(Error::input("cannot merge accumulators with different ignore policies"));
        }
        for (&c, &n) in &other.classes {
            self.classes.entry(c).or_default().add(n);
        }
        self.foreground.add(other.foreground);
        self.background.add(other.background);
        self.episodes += other.episodes;
        Ok(())
    }

    /// Per-class IoU for classes with a non-zero union.
    pub fn class_iou(&self) -> BTreeMap<u32, f64> {
        self.classes
            .iter()
            .filter_map(|(&c, n)| n.iou().map(|v| (c, v)))
            .collect()
    }

    /// Mean IoU over the classes with a non-zero union.
    pub fn miou(&self) -> Result<f64> {
        let per = self.class_iou();
        if per.is_empty() {
            return Err(Error::EmptyInput("no class has any foreground pixels".into()));
        }
        Ok(per.values().sum::<f64>() / per.len() as f64)
    }

    pub fn foreground_iou(&self) -> Option<f64> {
        self.foreground.iou()
    }

    pub fn background_iou(&self) -> Option<f64> {
        self.background.iou()
    }

    /// Mean of foreground and background IoU, class identity ignored.
    pub fn fbiou(&self) -> Result<f64> {
        match (self.foreground_iou(), self.background_iou()) {
            (Some(f), Some(b)) => Ok(0.5 * (f + b)),
            (Some(v), None) | (None, Some(v)) => Ok(v),
            (None, None) => Err(Error::EmptyInput("no pixels accumulated".into())),
        }
    }

    pub fn text_report(&self) -> Result<String> {
        let mut s = String::new();
        writeln!(s, "{:>8}  {:>12}  {:>12}  {:>8}", "class", "intersection", "union", "iou").unwrap();
        for (c, n) in &self.classes {
            let iou = n.iou().map_or("-".to_string(), |v| format!("{v:.4}"));
            writeln!(s, "{c:>8}  {:>12}  {:>12}  {iou:>8}", n.intersection, n.union).unwrap();
        }
        writeln!(s, "mIoU   {:.4}", self.miou()?).unwrap();
        writeln!(s, "FB-IoU {:.4}", self.fbiou()?).unwrap();
        Ok(s)
    }

    /// Line-oriented `key=value` report.
    pub fn kv_report(&self) -> Result<String> {
        let mut s = String::new();
        writeln!(s, "episodes={}", self.episodes).unwrap();
        writeln!(s, "classes={}", self.class_iou().len()).unwrap();
        writeln!(s, "ignore={}", self.ignore_enabled).unwrap();
        writeln!(s, "miou={}", self.miou()?).unwrap();
        writeln!(s, "fbiou={}", self.fbiou()?).unwrap();
        for (c, v) in self.class_iou() {
            writeln!(s, "iou.{c}={v}").unwrap();
        }
        Ok(s)
    }
}
