/// Outcome of feeding one epoch's validation metric to [`EarlyStopping`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Continue,
    Stop,
}

/// Patience-based stopping on a metric that should increase.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::NEG_INFINITY,
            best_epoch: 0,
            since_best: 0,
        }
    }

    /// Records `metric` for `epoch` (1-based). Only a strict increase counts
    /// as an improvement.
    pub fn observe(&mut self, epoch: usize, metric: f64) -> Verdict {
        if metric > self.best {
            self.best = metric;
            self.best_epoch = epoch;
            self.since_best = 0;
            Verdict::Improved
        } else {
            self.since_best += 1;
            if self.since_best >= self.patience {
                Verdict::Stop
            } else {
                Verdict::Continue
            }
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn epochs_since_best(&self) -> usize {
        self.since_best
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stops_patience_epochs_after_best() {
        let mut es = EarlyStopping::new(10);
        let mut seq = vec![0.1, 0.2];
        seq.extend(std::iter::repeat_n(0.2, 10));
        let mut stopped = None;
        for (k, &m) in seq.iter().enumerate() {
            if es.observe(k + 1, m) == Verdict::Stop {
                stopped = Some(k + 1);
                break;
            }
        }
        assert_eq!(stopped, Some(12));
        assert_eq!(es.best_epoch(), 2);
    }

    #[test]
    fn nan_never_improves() {
        let mut es = EarlyStopping::new(2);
        assert_eq!(es.observe(1, 0.3), Verdict::Improved);
        assert_eq!(es.observe(2, f64::NAN), Verdict::Continue);
        assert_eq!(es.observe(3, 0.1), Verdict::Stop);
    }
}
