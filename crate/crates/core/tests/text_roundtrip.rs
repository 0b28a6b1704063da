use proptest::prelude::*;
use unroll_tuner::generator::{gen_program, gen_schedules, GenConfig};
use unroll_tuner::text::{parse_program_file, write_program_with_schedule};

proptest! {
    #[test]
    fn generated_files_parse_back(seed in any::<u64>(), index in 0u64..100_000) {
        let cfg = GenConfig { seed, schedules_per_program: 3, ..GenConfig::default() };
        let p = gen_program(&cfg, index);
        for sp in gen_schedules(&cfg, index, &p) {
            let text = write_program_with_schedule(sp.base(), &sp.schedule());
            let (q, s) = parse_program_file(&text).unwrap();
            prop_assert_eq!(&q, sp.base());
            prop_assert_eq!(s, sp.schedule());
        }
    }
}
