use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Dtype, ParamStore};

/// EMA decay: linear from `start` to `end` over `anneal_steps`, then fixed.
/// `start == end` gives a constant decay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmaSchedule {
    pub start: f64,
    pub end: f64,
    pub anneal_steps: u64,
}

impl EmaSchedule {
    pub fn fixed(lambda: f64) -> Self {
        EmaSchedule {
            start: lambda,
            end: lambda,
            anneal_steps: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.start) || !(0.0..=1.0).contains(&self.end) {
            return Err(Error::Config(format!(
                "EMA decay must lie in [0, 1], got {} -> {}",
                self.start, self.end
            )));
        }
        Ok(())
    }

    pub fn lambda_at(&self, step: u64) -> f64 {
        if self.anneal_steps == 0 || step >= self.anneal_steps {
            return self.end;
        }
        self.start + (self.end - self.start) * step as f64 / self.anneal_steps as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherState {
    pub params: ParamStore,
    pub schedule: EmaSchedule,
    pub step: u64,
}

impl TeacherState {
    /// Starts as an exact copy of the student.
    pub fn new(student: &ParamStore, schedule: EmaSchedule) -> Result<Self> {
        schedule.validate()?;
        Ok(TeacherState {
            params: student.clone(),
            schedule,
            step: 0,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.schedule.lambda_at(self.step)
    }
}

/// `θ̄ ← λθ̄ + (1 − λ)θ` with the schedule's current λ; returns the λ used.
pub fn ema_update(teacher: &mut TeacherState, student: &ParamStore, dtype: Dtype) -> Result<f64> {
    if teacher.params.len() != student.len() {
        return Err(Error::shape(
            "ema_update",
            format!("teacher has {} tensors, student {}", teacher.params.len(), student.len()),
        ));
    }
    for (t, s) in teacher.params.entries().iter().zip(student.entries()) {
        if t.name != s.name || t.value.shape() != s.value.shape() {
            return Err(Error::shape(
                "ema_update",
                format!("`{}` {:?} vs `{}` {:?}", t.name, t.value.shape(), s.name, s.value.shape()),
            ));
        }
    }
    let lambda = teacher.lambda();
    for i in 0..student.len() {
        let id = teacher.params.id(&student.entries()[i].name).expect("checked");
        let src = student.entries()[i].value.data();
        for (t, &s) in teacher.params.get_mut(id).data_mut().iter_mut().zip(src) {
            *t = dtype.round(lambda * *t + (1.0 - lambda) * s);
        }
    }
    teacher.step += 1;
    Ok(lambda)
}
