//! Accuracy and F1. Two classes use binary F1 on class 1; more use the
//! unweighted mean of per-class F1.

/// `counts[truth][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    pub classes: usize,
    pub counts: Vec<Vec<usize>>,
}

impl Confusion {
    pub fn new(classes: usize) -> Confusion {
        Confusion {
            classes,
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn from_pairs(
        classes: usize,
        pairs: impl IntoIterator<Item = (usize, usize)>,
    ) -> Confusion {
        let mut c = Confusion::new(classes);
        for (t, p) in pairs {
            c.counts[t][p] += 1;
        }
        c
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let hit: usize = (0..self.classes).map(|k| self.counts[k][k]).sum();
        if self.total() == 0 {
            return 0.0;
        }
        hit as f64 / self.total() as f64
    }

    /// F1 of class `k`; zero when it is neither predicted nor present.
    pub fn class_f1(&self, k: usize) -> f64 {
        let tp = self.counts[k][k] as f64;
        let fp = (0..self.classes)
            .filter(|&t| t != k)
            .map(|t| self.counts[t][k])
            .sum::<usize>() as f64;
        let fn_ = (0..self.classes)
            .filter(|&p| p != k)
            .map(|p| self.counts[k][p])
            .sum::<usize>() as f64;
        if tp == 0.0 {
            return 0.0;
        }
        2.0 * tp / (2.0 * tp + fp + fn_)
    }

    pub fn f1(&self) -> f64 {
        if self.classes == 2 {
            self.class_f1(1)
        } else {
            (0..self.classes).map(|k| self.class_f1(k)).sum::<f64>() / self.classes as f64
        }
    }
}

pub fn accuracy(truth: &[usize], pred: &[usize], classes: usize) -> f64 {
    Confusion::from_pairs(classes, truth.iter().copied().zip(pred.iter().copied())).accuracy()
}

pub fn f1_score(truth: &[usize], pred: &[usize], classes: usize) -> f64 {
    Confusion::from_pairs(classes, truth.iter().copied().zip(pred.iter().copied())).f1()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_of_each() {
        // TP, FP, FN, TN
        let truth = [1, 0, 1, 0];
        let pred = [1, 1, 0, 0];
        assert_eq!(f1_score(&truth, &pred, 2), 0.5);
        assert_eq!(accuracy(&truth, &pred, 2), 0.5);
    }

    #[test]
    fn macro_average() {
        let c = Confusion::from_pairs(3, [(0, 0), (1, 1), (2, 1)]);
        // class 0: 1, class 1: 2/3, class 2: 0
        assert!((c.f1() - (1.0 + 2.0 / 3.0) / 3.0).abs() < 1e-15);
    }
}
