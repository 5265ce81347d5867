use std::time::{Duration, Instant};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::{PayloadKind, PayloadSpec, TaskId};

pub const CONST_BYTE: u8 = 0x42;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PayloadError {
    #[error("SUM task has no inputs")]
    SumWithoutInputs,
    #[error("SUM input {index} has {len} bytes, at least 8 are required")]
    ShortInput { index: usize, len: usize },
}

/// How a task spends its configured duration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DurationMode {
    /// Block the thread; concurrent slots overlap even on a single core.
    #[default]
    Sleep,
    /// Spin on the clock, occupying a CPU for the whole duration.
    BusyWait,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExecOptions {
    pub duration_scale: f64,
    pub duration_mode: DurationMode,
}

impl Default for ExecOptions {
    fn default() -> Self {
        ExecOptions { duration_scale: 1.0, duration_mode: DurationMode::Sleep }
    }
}

impl ExecOptions {
    pub fn scaled(&self, duration_ms: u64) -> Duration {
        Duration::from_secs_f64(duration_ms as f64 * self.duration_scale / 1000.0)
    }

    fn spend(&self, duration_ms: u64) {
        if duration_ms == 0 {
            return;
        }
        let duration = self.scaled(duration_ms);
        match self.duration_mode {
            DurationMode::Sleep => std::thread::sleep(duration),
            DurationMode::BusyWait => {
                let start = Instant::now();
                while start.elapsed() < duration {
                    std::hint::spin_loop();
                }
            }
        }
    }
}

/// Runs one task payload over its input values, ordered like the task's inputs.
///
/// SUM adds the first eight bytes of every input as little-endian `u64`
/// values, wrapping on overflow.
pub fn execute_payload(
    task: TaskId,
    spec: &PayloadSpec,
    inputs: &[&[u8]],
    options: &ExecOptions,
) -> Result<Vec<u8>, PayloadError> {
    let size = spec.output_size as usize;
    match spec.kind {
        PayloadKind::Const => Ok(vec![CONST_BYTE; size]),
        PayloadKind::Sleep => {
            options.spend(spec.duration_ms);
            Ok(vec![0; size])
        }
        PayloadKind::Noise => {
            options.spend(spec.duration_ms);
            let mut out = vec![0; size];
            ChaCha8Rng::seed_from_u64(task).fill_bytes(&mut out);
            Ok(out)
        }
        PayloadKind::Sum => {
            if inputs.is_empty() {
                return Err(PayloadError::SumWithoutInputs);
            }
            let mut total = 0u64;
            for (index, input) in inputs.iter().enumerate() {
                let head: [u8; 8] = input
                    .get(..8)
                    .and_then(|b| b.try_into().ok())
                    .ok_or(PayloadError::ShortInput { index, len: input.len() })?;
                total = total.wrapping_add(u64::from_le_bytes(head));
            }
            options.spend(spec.duration_ms);
            Ok(total.to_le_bytes().to_vec())
        }
    }
}

pub fn decode_u64(bytes: &[u8]) -> Option<u64> {
    bytes.get(..8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(spec: PayloadSpec, inputs: &[&[u8]]) -> Result<Vec<u8>, PayloadError> {
        execute_payload(1, &spec, inputs, &ExecOptions::default())
    }

    #[test]
    fn sum_of_two_values() {
        let a = 3u64.to_le_bytes();
        let b = 4u64.to_le_bytes();
        assert_eq!(run(PayloadSpec::sum(0), &[&a, &b]).unwrap(), 7u64.to_le_bytes().to_vec());
    }

    #[test]
    fn sum_reads_only_the_first_eight_bytes() {
        let a = [1, 0, 0, 0, 0, 0, 0, 0, 0xff, 0xff];
        assert_eq!(decode_u64(&run(PayloadSpec::sum(0), &[&a]).unwrap()), Some(1));
    }

    #[test]
    fn sum_errors() {
        assert_eq!(run(PayloadSpec::sum(0), &[]), Err(PayloadError::SumWithoutInputs));
        let short = [1u8, 2, 3];
        assert_eq!(
            run(PayloadSpec::sum(0), &[&short]),
            Err(PayloadError::ShortInput { index: 0, len: 3 })
        );
    }

    #[test]
    fn const_payload() {
        assert_eq!(run(PayloadSpec::constant(4), &[]).unwrap(), vec![0x42; 4]);
    }

    #[test]
    fn sleep_and_noise_sizes() {
        let out = run(PayloadSpec::sleep(0, 13), &[]).unwrap();
        assert_eq!(out, vec![0; 13]);
        let a = execute_payload(5, &PayloadSpec::noise(32), &[], &ExecOptions::default()).unwrap();
        let b = execute_payload(5, &PayloadSpec::noise(32), &[], &ExecOptions::default()).unwrap();
        let c = execute_payload(6, &PayloadSpec::noise(32), &[], &ExecOptions::default()).unwrap();
        assert_eq!(a.len(), 32);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn durations_are_scaled() {
        let opts = ExecOptions { duration_scale: 0.5, duration_mode: DurationMode::BusyWait };
        let start = Instant::now();
        execute_payload(1, &PayloadSpec::sleep(40, 0), &[], &opts).unwrap();
        let elapsed = start.elapsed();
        assert!(elapsed >= Duration::from_millis(20));
        assert!(elapsed < Duration::from_millis(200));
    }
}
