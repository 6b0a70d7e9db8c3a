use serde::{Deserialize, Serialize};

/// Forward and backward pass tallies for a run.
///
/// A loss-and-gradient evaluation counts one of each, a batched meta-update
/// also counts one of each, an inference-only forward counts one forward,
/// and a loss-improvement reading counts two forwards.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepCounters {
    pub forwards: u64,
    pub backwards: u64,
}

impl StepCounters {
    pub fn record_grad(&mut self) {
        self.forwards += 1;
        self.backwards += 1;
    }

    pub fn record_batched(&mut self) {
        self.forwards += 1;
        self.backwards += 1;
    }

    pub fn record_inference(&mut self) {
        self.forwards += 1;
    }

    pub fn record_lii(&mut self) {
        self.forwards += 2;
    }
}

impl std::ops::Add for StepCounters {
    type Output = StepCounters;

    fn add(self, rhs: StepCounters) -> StepCounters {
        StepCounters { forwards: self.forwards + rhs.forwards, backwards: self.backwards + rhs.backwards }
    }
}
