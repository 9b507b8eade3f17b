use crate::error::{Error, Result};

/// How a plateau decay changes the learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecayMode {
    /// `lr <- lr * factor`.
    Multiply,
    /// `lr <- lr * (1 - factor)`.
    Reduce,
}

impl DecayMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "multiply" => Ok(DecayMode::Multiply),
            "reduce" => Ok(DecayMode::Reduce),
            other => Err(Error::Config(format!("unknown decay mode `{other}`"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            DecayMode::Multiply => "multiply",
            DecayMode::Reduce => "reduce",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    /// Iterations without a new best validation loss before a decay.
    pub plateau: usize,
    /// Iterations without a new best validation dice before stopping.
    pub patience: usize,
    pub decay_factor: f64,
    pub decay_mode: DecayMode,
    pub batch_size: usize,
    /// Iterations between validation passes.
    pub validate_every: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            plateau: 2_000,
            patience: 10_000,
            decay_factor: 0.05,
            decay_mode: DecayMode::Multiply,
            batch_size: 1,
            validate_every: 200,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.validate_every == 0 || self.plateau == 0 {
            return Err(Error::Config(
                "batch size, plateau window and validation cadence must be positive".into(),
            ));
        }
        if self.patience < self.plateau {
            return Err(Error::Config(format!(
                "patience {} is shorter than the plateau window {}",
                self.patience, self.plateau
            )));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return Err(Error::Config(format!("decay factor {} must lie in (0, 1)", self.decay_factor)));
        }
        Ok(())
    }

    pub fn decayed(&self, lr: f64) -> f64 {
        match self.decay_mode {
            DecayMode::Multiply => lr * self.decay_factor,
            DecayMode::Reduce => lr * (1.0 - self.decay_factor),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Action {
    Continue,
    Decay,
    Stop,
}

/// Best-so-far bookkeeping for plateau decay and early stopping. Windows
/// are measured from iteration 0, so nothing fires before a full window.
#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleTracker {
    pub best_loss: f64,
    pub best_loss_iteration: usize,
    pub best_dice: f64,
    pub best_dice_iteration: usize,
    last_decay: usize,
}

impl Default for ScheduleTracker {
    fn default() -> Self {
        ScheduleTracker {
            best_loss: f64::INFINITY,
            best_loss_iteration: 0,
            best_dice: f64::NEG_INFINITY,
            best_dice_iteration: 0,
            last_decay: 0,
        }
    }
}

impl ScheduleTracker {
    /// Whether `dice` is a strict improvement, recorded without acting on it.
    pub fn is_best_dice(&self, dice: f64) -> bool {
        dice > self.best_dice
    }

    /// Record a validation result at `iteration` and decide what to do.
    pub fn tick(&mut self, schedule: &Schedule, iteration: usize, loss: f64, dice: f64) -> Action {
        if loss < self.best_loss {
            self.best_loss = loss;
            self.best_loss_iteration = iteration;
        }
        if dice > self.best_dice {
            self.best_dice = dice;
            self.best_dice_iteration = iteration;
        }
        if iteration - self.best_dice_iteration >= schedule.patience {
            return Action::Stop;
        }
        if iteration - self.best_loss_iteration.max(self.last_decay) >= schedule.plateau {
            self.last_decay = iteration;
            return Action::Decay;
        }
        Action::Continue
    }
}
