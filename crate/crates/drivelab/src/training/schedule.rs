//! Learning-rate schedule, early stopping and the training-curve log.

use super::TrainConfig;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub iter: u64,
    pub lr: f64,
    pub components: Vec<(String, f64)>,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut names: Vec<String> = Vec::new();
        for r in &self.rows {
            for (n, _) in &r.components {
                if !names.contains(n) {
                    names.push(n.clone());
                }
            }
        }
        let mut out = String::from("iter,lr");
        for n in &names {
            out.push(',');
            out.push_str(n);
        }
        out.push_str(",val_loss\n");
        for r in &self.rows {
            out.push_str(&format!("{},{}", r.iter, r.lr));
            for n in &names {
                match r.components.iter().find(|(cn, _)| cn == n) {
                    Some((_, v)) => out.push_str(&format!(",{v}")),
                    None => out.push(','),
                }
            }
            match r.val_loss {
                Some(v) => out.push_str(&format!(",{v}\n")),
                None => out.push_str(",\n"),
            }
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> std::io::Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_csv())
    }
}

pub enum Decision {
    Continue,
    /// New best validation loss: snapshot the parameters.
    Snapshot,
    Stop,
}

/// Tracks the adaptive learning rate (drop by `lr_drop_factor` when the
/// training loss stalls for `lr_patience_iters`) and validation early
/// stopping (stop `early_stop_patience` validations past the best).
pub struct Schedule {
    cfg: TrainConfig,
    pub lr: f64,
    pub iter: u64,
    best_train: f64,
    best_train_iter: u64,
    pub best_val: f64,
    pub best_val_iter: u64,
    pub log: TrainLog,
}

impl Schedule {
    pub fn new(cfg: &TrainConfig) -> Self {
        Schedule {
            cfg: cfg.clone(),
            lr: cfg.lr,
            iter: 0,
            best_train: f64::INFINITY,
            best_train_iter: 0,
            best_val: f64::INFINITY,
            best_val_iter: 0,
            log: TrainLog::default(),
        }
    }

    /// Record one optimization step. Returns the (possibly dropped)
    /// learning rate to use for the next step.
    pub fn record_train(&mut self, components: &[(String, f64)]) -> f64 {
        self.iter += 1;
        let total: f64 = components.iter().map(|(_, v)| v).sum();
        if total < self.best_train {
            self.best_train = total;
            self.best_train_iter = self.iter;
        } else if self.iter - self.best_train_iter >= self.cfg.lr_patience_iters {
            self.lr /= self.cfg.lr_drop_factor;
            self.best_train_iter = self.iter;
        }
        if self.iter % 50 == 0 || self.iter == 1 {
            self.log.rows.push(LogRow {
                iter: self.iter,
                lr: self.lr,
                components: components.to_vec(),
                val_loss: None,
            });
        }
        self.lr
    }

    pub fn should_validate(&self) -> bool {
        self.iter % self.cfg.val_every_iters == 0
    }

    pub fn record_val(&mut self, val: f64) -> Decision {
        self.log.rows.push(LogRow {
            iter: self.iter,
            lr: self.lr,
            components: Vec::new(),
            val_loss: Some(val),
        });
        let decision = if val < self.best_val {
            self.best_val = val;
            self.best_val_iter = self.iter;
            Decision::Snapshot
        } else if self.iter - self.best_val_iter
            >= self.cfg.early_stop_patience * self.cfg.val_every_iters
        {
            Decision::Stop
        } else {
            Decision::Continue
        };
        decision
    }

    pub fn done(&self) -> bool {
        self.iter >= self.cfg.max_iters
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TrainConfig {
        TrainConfig {
            lr_patience_iters: 10,
            val_every_iters: 5,
            early_stop_patience: 2,
            max_iters: 1000,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn lr_drops_when_train_loss_stalls() {
        let mut s = Schedule::new(&cfg());
        let lr0 = s.lr;
        for _ in 0..10 {
            s.record_train(&[("l".into(), 1.0)]);
        }
        assert_eq!(s.lr, lr0, "first iteration set the best, window not yet expired");
        for _ in 0..10 {
            s.record_train(&[("l".into(), 1.0)]);
        }
        assert!((s.lr - lr0 / 10.0).abs() < 1e-12);
    }

    #[test]
    fn early_stop_respects_patience_bound() {
        let c = cfg();
        let mut s = Schedule::new(&c);
        let mut stopped_at = None;
        for k in 0..200u64 {
            s.record_train(&[("l".into(), 1.0 / (k + 1) as f64)]);
            if s.should_validate() {
                // Validation never improves after the first.
                let val = if k < 5 { 1.0 } else { 2.0 };
                if matches!(s.record_val(val), Decision::Stop) {
                    stopped_at = Some(s.iter);
                    break;
                }
            }
        }
        let stop = stopped_at.expect("must stop");
        assert!(
            stop - s.best_val_iter <= c.early_stop_patience * c.val_every_iters,
            "stopped {} iters past best {}",
            stop,
            s.best_val_iter
        );
    }

    #[test]
    fn csv_has_header_and_rows() {
        let mut s = Schedule::new(&cfg());
        s.record_train(&[("control".into(), 0.5)]);
        for _ in 0..4 {
            s.record_train(&[("control".into(), 0.5)]);
        }
        s.record_val(0.4);
        let csv = s.log.to_csv();
        assert!(csv.starts_with("iter,lr,control,val_loss"));
        assert!(csv.lines().count() >= 3);
    }
}
