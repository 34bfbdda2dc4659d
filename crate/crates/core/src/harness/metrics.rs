use serde::{Deserialize, Serialize};

/// Throughput accounting for one or more decodes.
///
/// `tokens_generated` counts committed positions up to and including EOS;
/// edits are counted separately and never add to it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub tokens_generated: usize,
    pub forwards_used: usize,
    pub edits_applied: usize,
    pub blocks_decoded: usize,
    pub tpf: f64,
    pub wall_time: f64,
    pub tps: f64,
    pub task_score: Option<f64>,
}

impl Metrics {
    pub fn new(tokens_generated: usize, forwards_used: usize, edits_applied: usize, blocks_decoded: usize) -> Self {
        let mut m = Self {
            tokens_generated,
            forwards_used,
            edits_applied,
            blocks_decoded,
            ..Default::default()
        };
        m.recompute();
        m
    }

    pub fn tokens_per_forward(tokens: usize, forwards: usize) -> f64 {
        if forwards == 0 {
            0.0
        } else {
            tokens as f64 / forwards as f64
        }
    }

    fn recompute(&mut self) {
        self.tpf = Self::tokens_per_forward(self.tokens_generated, self.forwards_used);
        self.tps = if self.wall_time > 0.0 {
            self.tokens_generated as f64 / self.wall_time
        } else {
            0.0
        };
    }

    pub fn with_wall_time(mut self, seconds: f64) -> Self {
        self.wall_time = seconds;
        self.recompute();
        self
    }

    /// Sums counters across runs; TPF of the aggregate is total tokens over total forwards.
    pub fn accumulate(&mut self, other: &Metrics) {
        self.tokens_generated += other.tokens_generated;
        self.forwards_used += other.forwards_used;
        self.edits_applied += other.edits_applied;
        self.blocks_decoded += other.blocks_decoded;
        self.wall_time += other.wall_time;
        self.recompute();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tpf_definition() {
        let m = Metrics::new(10, 4, 0, 1);
        assert_eq!(m.tpf, 2.5);
        assert_eq!(Metrics::new(0, 0, 0, 0).tpf, 0.0);
        let mut a = Metrics::new(8, 2, 1, 1);
        a.accumulate(&Metrics::new(4, 2, 0, 1));
        assert_eq!(a.tpf, 3.0);
        assert_eq!(a.edits_applied, 1);
    }
}
