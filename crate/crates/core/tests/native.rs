//! Compiled kernels agree with the interpreter. Skipped without a C compiler.

use unroll_tuner::backend::{toolchain_available, Backend, NativeBackend, Toolchain};
use unroll_tuner::bench_programs::{mmxm, smm};
use unroll_tuner::generator::{gen_program, gen_schedules, GenConfig};
use unroll_tuner::interp::execute;
use unroll_tuner::{DataType, ScheduledProgram, Transform, UnrollFactor};

fn backend() -> Option<NativeBackend> {
    let tc = Toolchain::default();
    if toolchain_available(&tc) {
        Some(NativeBackend { toolchain: tc })
    } else {
        eprintln!("no C toolchain; skipping");
        None
    }
}

#[test]
fn integer_kernels_match_interpreter_checksums() {
    let Some(nb) = backend() else { return };
    let cfg = GenConfig {
        seed: 5,
        depth_range: (1, 3),
        extent_choices: vec![4, 8, 16],
        dtype_choices: vec![DataType::Int32, DataType::Int64],
        schedules_per_program: 2,
        max_leaves: 10,
        ..GenConfig::default()
    };
    for i in 0..4 {
        let p = gen_program(&cfg, i);
        for sp in gen_schedules(&cfg, i, &p) {
            for u in [UnrollFactor::NONE, UnrollFactor::ALL[2], UnrollFactor::ALL[6]] {
                let sp = sp.apply_unroll(u).unwrap();
                assert_eq!(nb.checksum(&sp).unwrap(), execute(&sp).output_checksum(), "{}", sp.schedule());
            }
        }
    }
}

#[test]
fn timed_benchmark_kernel_reports_runs() {
    let Some(nb) = backend() else { return };
    let sp = ScheduledProgram::new(smm(64));
    let r = nb.evaluate(&sp, UnrollFactor::ALL[2], 3).unwrap();
    assert_eq!(r.runs, 3);
    assert_eq!(r.per_run_ms.len(), 3);
    assert!(r.mean_ms > 0.0);
    let tiled = ScheduledProgram::new(mmxm(12))
        .apply_transform(&Transform::tile2(0, 1, 4, 8))
        .unwrap()
        .apply_unroll(UnrollFactor::ALL[3])
        .unwrap();
    assert_eq!(nb.checksum(&tiled).unwrap(), execute(&tiled).output_checksum());
}
