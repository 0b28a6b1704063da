//! Fixed inputs shared by the benchmarks, built once per bench group.

use unroll_tuner::dataset::label_sample;
use unroll_tuner::backend::CostModel;
use unroll_tuner::generator::{gen_program, gen_schedules, GenConfig};
use unroll_tuner::mlp::Matrix;
use unroll_tuner::{ScheduledProgram, UnrollFactor};

/// One scheduled program per generator index.
pub fn corpus(seed: u64, count: u64) -> Vec<ScheduledProgram> {
    let cfg = GenConfig {
        seed,
        ..GenConfig::default()
    };
    (0..count)
        .map(|i| {
            let p = gen_program(&cfg, i);
            gen_schedules(&cfg, i, &p).swap_remove(0)
        })
        .collect()
}

/// Feature matrix and class indices for a labeled corpus.
pub fn training_batch(programs: &[ScheduledProgram]) -> (Matrix, Vec<usize>) {
    let backend = CostModel::default();
    let rows: Vec<_> = programs
        .iter()
        .map(|sp| label_sample(sp, &backend, 1).expect("cost model labels").row())
        .collect();
    let x = Matrix::from_rows(&rows.iter().map(|r| r.features.to_row()).collect::<Vec<_>>());
    let y = rows.iter().map(|r| r.label.class_index()).collect();
    (x, y)
}

pub const CLASSES: [UnrollFactor; 7] = UnrollFactor::ALL;
